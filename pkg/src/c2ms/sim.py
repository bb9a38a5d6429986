"""Desk-scale fleet simulation and the two benchmark families.

Hundreds of agents run as threads in one process, each emitting metrics
driven by a deterministic profile instead of reading the local OS.  Two
fleets started with the same profile and seed produce byte-identical
sample streams, which makes benchmark runs and the test suite
reproducible.

Benchmarks report per-repetition timings plus mean and a 95% confidence
half-width (Student's t), and include the raw timings so every reported
number can be recomputed from the report itself.
"""

from __future__ import annotations

import http.client
import json
import math
import random
import statistics
import time
from dataclasses import dataclass, field

from .agent import Agent, AgentConfig, MetricSample
from .aggregator import Aggregator, UdpListener
from .api import ApiConfig, ApiService
from .control import ControlEngine, ExecutionMode, LocalTransport
from .protocol import Slope
from .registry import CloudletRegistry
from .rrd import SeriesKey, SeriesStore

SIM_MEM_TOTAL_KB = 1_048_576.0


class SimError(Exception):
    pass


# -- profiles ---------------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: float

    def stream(self, seed: int, dt: float):
        while True:
            yield self.value


@dataclass(frozen=True)
class Sine:
    mean: float
    amplitude: float
    period_s: float

    def stream(self, seed: int, dt: float):
        k = 0
        while True:
            yield self.mean + self.amplitude * math.sin(2 * math.pi * k * dt / self.period_s)
            k += 1


@dataclass(frozen=True)
class RandomWalk:
    start: float
    step_sd: float
    low: float
    high: float

    def stream(self, seed: int, dt: float):
        rng = random.Random(seed)
        v = self.start
        while True:
            yield v
            v = min(self.high, max(self.low, v + rng.gauss(0.0, self.step_sd)))


def parse_profile(text: str):
    """``constant:10`` | ``sine:mean,amp,period`` | ``walk:start,sd,lo,hi``."""
    kind, sep, rest = text.partition(":")
    args = [a for a in rest.split(",") if a] if sep else []
    try:
        if kind == "constant" and len(args) == 1:
            return Constant(float(args[0]))
        if kind == "sine" and len(args) == 3:
            return Sine(float(args[0]), float(args[1]), float(args[2]))
        if kind == "walk" and len(args) == 4:
            return RandomWalk(float(args[0]), float(args[1]), float(args[2]), float(args[3]))
    except ValueError as exc:
        raise SimError(f"bad profile {text!r}: {exc}") from exc
    raise SimError(f"bad profile {text!r}")


class SimCollector:
    """Profile-driven stand-in for CoreCollector; fully deterministic."""

    name = "sim"

    def __init__(self, hostname: str, profile, seed: int, tick_seconds: float,
                 emit_temperature: bool = True):
        self.hostname = hostname
        self._stream = profile.stream(seed, tick_seconds)
        self.emit_temperature = emit_temperature

    def collect(self, now: float | None = None) -> list[MetricSample]:
        v = next(self._stream)
        cpu_user = min(100.0, max(0.0, v))
        h = self.hostname
        samples = [
            MetricSample(h, "cpu_user", cpu_user, "%"),
            MetricSample(h, "cpu_system", 0.0, "%"),
            MetricSample(h, "cpu_idle", 100.0 - cpu_user, "%"),
            MetricSample(h, "load_one", cpu_user / 100.0),
            MetricSample(h, "mem_total", SIM_MEM_TOTAL_KB, "KB", Slope.ZERO),
            MetricSample(h, "mem_free", SIM_MEM_TOTAL_KB * (1.0 - cpu_user / 200.0), "KB"),
            MetricSample(h, "bytes_in", cpu_user * 1e4, "B/s"),
            MetricSample(h, "bytes_out", cpu_user * 5e3, "B/s"),
            MetricSample(h, "cpu_num", 1.0, "", Slope.ZERO),
        ]
        if self.emit_temperature:
            samples.append(MetricSample(h, "cpu_temp", 30.0 + cpu_user / 2.0, "C"))
        return samples


# -- fleets -------------------------------------------------------------------


class Fleet:
    def __init__(self, agents: list[Agent]):
        self.agents = agents

    @property
    def hostnames(self) -> list[str]:
        return [a.hostname for a in self.agents]

    def stop(self):
        for agent in self.agents:
            agent._stop.set()
        for agent in self.agents:
            agent.stop(timeout=2)


def spawn_agents(
    count: int,
    profile,
    aggregator_addr: tuple[str, int],
    seed: int = 0,
    heartbeat_interval: float = 5.0,
    metric_interval: float = 15.0,
    hostname_prefix: str = "node",
    emit_temperature: bool = True,
) -> Fleet:
    """Start `count` in-process agents named node000, node001, ..."""
    if count < 1:
        raise SimError(f"count must be >= 1, got {count}")
    agents = []
    for i in range(count):
        hostname = f"{hostname_prefix}{i:03d}"
        config = AgentConfig(
            aggregator=aggregator_addr,
            heartbeat_interval=heartbeat_interval,
            metric_interval=metric_interval,
            hostname=hostname,
        )
        collector = SimCollector(hostname, profile, seed=seed + i, tick_seconds=metric_interval,
                                 emit_temperature=emit_temperature)
        agents.append(Agent(config, collectors=[collector]).start())
    return Fleet(agents)


# -- benchmark reports --------------------------------------------------------

# two-sided 95% critical values of Student's t; df > 30 falls back to z
_T_975 = {
    1: 12.706, 2: 4.303, 3: 3.182, 4: 2.776, 5: 2.571, 6: 2.447, 7: 2.365,
    8: 2.306, 9: 2.262, 10: 2.228, 11: 2.201, 12: 2.179, 13: 2.160, 14: 2.145,
    15: 2.131, 16: 2.120, 17: 2.110, 18: 2.101, 19: 2.093, 20: 2.086,
    21: 2.080, 22: 2.074, 23: 2.069, 24: 2.064, 25: 2.060, 26: 2.056,
    27: 2.052, 28: 2.048, 29: 2.045, 30: 2.042,
}


def t_critical_975(df: int) -> float:
    if df < 1:
        raise ValueError("degrees of freedom must be >= 1")
    return _T_975.get(df, 1.960)


def confidence_half_width(timings: list[float]) -> float | None:
    """95% half-width from the per-repetition samples; None below 2 reps."""
    if len(timings) < 2:
        return None
    sd = statistics.stdev(timings)
    return t_critical_975(len(timings) - 1) * sd / math.sqrt(len(timings))


@dataclass
class BenchReport:
    scenario: str
    host_count: int
    repetitions: int
    timings_s: list[float] = field(default_factory=list)

    @property
    def mean_s(self) -> float:
        return statistics.fmean(self.timings_s)

    @property
    def half_width_s(self) -> float | None:
        return confidence_half_width(self.timings_s)

    def to_json_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "host_count": self.host_count,
            "repetitions": self.repetitions,
            "timings_s": list(self.timings_s),
            "mean_s": self.mean_s,
            "half_width_s": self.half_width_s,
        }


def time_call(fn) -> float:
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


# -- in-process stack ----------------------------------------------------------


class SimStack:
    """Aggregator + UDP listener + HTTP API in one process, for benches and demos."""

    def __init__(self, api_config: ApiConfig | None = None, down_threshold: float = 20.0,
                 store: SeriesStore | None = None, transport=None,
                 clusters_path: str | None = None):
        self.registry = CloudletRegistry(path=clusters_path)
        self.aggregator = Aggregator(
            store=store if store is not None else SeriesStore(),
            registry=self.registry,
            down_threshold=down_threshold,
        )
        self.engine = ControlEngine(transport=transport or LocalTransport())
        self.listener = UdpListener(self.aggregator, ("127.0.0.1", 0))
        self.api = ApiService(self.aggregator, self.engine, api_config or ApiConfig())

    def start(self) -> "SimStack":
        self.listener.start()
        self.api.start()
        return self

    def stop(self):
        self.api.stop()
        self.listener.stop()

    @property
    def udp_address(self) -> tuple[str, int]:
        return self.listener.address

    @property
    def base_url(self) -> str:
        return self.api.base_url

    def login_token(self) -> str:
        body = http_json(self.api.address, "POST", "/api/login",
                         body={"username": self.api.config.default_username,
                               "password": self.api.config.default_password})
        return body["token"]


def http_json(address, method, path, body=None, token=None, timeout=30.0):
    """Minimal end-to-end HTTP round trip used by benchmarks and the CLI."""
    conn = http.client.HTTPConnection(address[0], address[1], timeout=timeout)
    try:
        headers = {"Content-Type": "application/json"}
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = json.dumps(body) if body is not None else None
        conn.request(method, path, body=payload, headers=headers)
        response = conn.getresponse()
        data = response.read()
        if response.status >= 400:
            raise SimError(f"{method} {path} -> {response.status}: {data[:200]!r}")
        return json.loads(data)
    finally:
        conn.close()


# -- benchmarks -----------------------------------------------------------------


class InsufficientData(SimError):
    pass


def wait_for_fleet(stack: SimStack, hostnames, timeout: float) -> float:
    """Blocks until every host is up; returns how long that took."""
    t0 = time.monotonic()
    want = set(hostnames)
    while time.monotonic() - t0 < timeout:
        up = {h for h in stack.aggregator.known_hostnames() if stack.aggregator.is_up(h)}
        if want <= up:
            return time.monotonic() - t0
        time.sleep(0.2)
    missing = want - {h for h in stack.aggregator.known_hostnames() if stack.aggregator.is_up(h)}
    raise SimError(f"{len(missing)} hosts never came up (e.g. {sorted(missing)[:3]})")


def bench_query(stack: SimStack, hostnames: list[str], host_counts: list[int],
                repetitions: int = 15, window_s: float = 3600.0,
                metric: str = "cpu_user", cloudlet: str = "bench") -> list[BenchReport]:
    """Times `series(cloudlet, metric, last window)` end-to-end over HTTP.

    The bench cloudlet grows through the sweep (counts ascending) so the
    same hosts serve every size without violating membership exclusivity.
    """
    counts = sorted(set(host_counts))
    if counts[0] < 1 or counts[-1] > len(hostnames):
        raise SimError(f"counts must lie in [1, {len(hostnames)}]")
    probe = stack.aggregator.store
    if not any(probe.has_series(SeriesKey(h, metric)) for h in hostnames):
        raise InsufficientData(f"no {metric} series yet; let agents run two slot durations")
    token = stack.login_token()
    if cloudlet not in stack.registry.cloudlet_names():
        stack.registry.create_cloudlet(cloudlet)
    members = set(stack.registry.members(cloudlet))
    reports = []
    for count in counts:
        for hostname in hostnames[:count]:
            if hostname not in members:
                stack.registry.add_member(cloudlet, hostname)
                members.add(hostname)
        timings = []
        for _ in range(repetitions):
            end = time.time()
            start = end - window_s
            path = f"/api/series?scope=cloudlet:{cloudlet}&metric={metric}&start={start}&end={end}"
            t0 = time.perf_counter()
            body = http_json(stack.api.address, "GET", path, token=token)
            timings.append(time.perf_counter() - t0)
            if len(body["layers"]) != count:
                raise SimError(f"expected {count} layers, got {len(body['layers'])}")
        reports.append(BenchReport(f"query-{count}", count, repetitions, timings))
    return reports


def bench_control(host_count: int, task_duration_s: float = 1.0, repetitions: int = 5,
                  fanout_limit: int | None = None,
                  engine: ControlEngine | None = None) -> tuple[BenchReport, BenchReport, float]:
    """Serial vs parallel `sleep` over synthetic targets; returns (serial, parallel, speedup)."""
    if host_count < 1:
        raise SimError("host_count must be >= 1")
    engine = engine or ControlEngine(transport=LocalTransport())
    targets = [f"host{i:03d}" for i in range(host_count)]
    command = f"sleep {task_duration_s}"
    fanout = fanout_limit or max(engine.fanout_limit, host_count)

    timings: dict[ExecutionMode, list[float]] = {ExecutionMode.SERIAL: [], ExecutionMode.PARALLEL: []}
    for _ in range(repetitions):
        for mode in (ExecutionMode.SERIAL, ExecutionMode.PARALLEL):
            job_id = engine.submit(targets, command, mode, fanout_limit=fanout,
                                   per_target_timeout=task_duration_s * 10 + 30)
            engine.await_results(job_id)
            timings[mode].append(engine.get_job(job_id).wall_seconds)

    serial = BenchReport(f"control-serial-{host_count}", host_count, repetitions,
                         timings[ExecutionMode.SERIAL])
    parallel = BenchReport(f"control-parallel-{host_count}", host_count, repetitions,
                           timings[ExecutionMode.PARALLEL])
    return serial, parallel, serial.mean_s / parallel.mean_s
