"""Benchmark report output: line-delimited JSON, a plain table, figures.

Every JSONL record carries the raw per-repetition timings, so the mean
and confidence half-width printed next to them can be recomputed by a
reader; the report audits itself.  When a report is written to disk a
matplotlib rendering of the same numbers lands next to it.
"""

from __future__ import annotations

import json
import os

from .sim import BenchReport


def write_jsonl(records: list[dict], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record) + "\n")


def read_jsonl(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _fmt_hw(half_width: float | None) -> str:
    return "n/a" if half_width is None else f"{half_width:.4f}"


def format_table(reports: list[BenchReport]) -> str:
    header = f"{'scenario':<24} {'hosts':>5} {'reps':>4} {'mean_s':>10} {'ci95_s':>10}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.scenario:<24} {r.host_count:>5} {r.repetitions:>4} "
            f"{r.mean_s:>10.4f} {_fmt_hw(r.half_width_s):>10}"
        )
    return "\n".join(lines)


def figure_path_for(out_path: str) -> str:
    stem, _ = os.path.splitext(out_path)
    return stem + ".png"


def render_query_figure(reports: list[BenchReport], path: str) -> None:
    """Query latency against group size, mean with 95% CI bars."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    counts = [r.host_count for r in reports]
    means = [r.mean_s * 1000 for r in reports]
    errors = [(r.half_width_s or 0.0) * 1000 for r in reports]
    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.errorbar(counts, means, yerr=errors, marker="o", capsize=3, color="#CC0000")
    ax.set_xlabel("hosts in cloudlet")
    ax.set_ylabel("series query time (ms)")
    ax.set_title("Stacked-series query latency vs cloudlet size")
    ax.grid(True, alpha=0.3)
    ax.set_ylim(bottom=0)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_control_figure(serial: BenchReport, parallel: BenchReport, speedup: float,
                          path: str) -> None:
    """Serial vs parallel wall time for the identical grouped command."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    bars = ax.bar(
        ["serial", "parallel"],
        [serial.mean_s, parallel.mean_s],
        yerr=[serial.half_width_s or 0.0, parallel.half_width_s or 0.0],
        color=["#222222", "#00CF06"],
        capsize=4,
    )
    ax.bar_label(bars, fmt="%.2f s")
    ax.set_ylabel("wall time (s)")
    ax.set_title(f"Command over {serial.host_count} hosts: speedup {speedup:.1f}x")
    ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_query_report(reports: list[BenchReport], out_path: str | None, plot: bool = True) -> str:
    records = [dict(kind="bench_query", **r.to_json_dict()) for r in reports]
    if out_path:
        write_jsonl(records, out_path)
        if plot:
            render_query_figure(reports, figure_path_for(out_path))
    return format_table(reports)


def emit_control_report(serial: BenchReport, parallel: BenchReport, speedup: float,
                        out_path: str | None, plot: bool = True) -> str:
    records = [
        dict(kind="bench_control", **serial.to_json_dict()),
        dict(kind="bench_control", **parallel.to_json_dict()),
        {"kind": "speedup", "host_count": serial.host_count,
         "serial_mean_s": serial.mean_s, "parallel_mean_s": parallel.mean_s, "speedup": speedup},
    ]
    if out_path:
        write_jsonl(records, out_path)
        if plot:
            render_control_figure(serial, parallel, speedup, figure_path_for(out_path))
    table = format_table([serial, parallel])
    return f"{table}\nspeedup: {speedup:.2f}x"
