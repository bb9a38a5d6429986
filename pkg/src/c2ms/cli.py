"""Command-line entry points.

``c2ms agent``       runs the per-host sampling daemon.
``c2ms aggregator``  runs the collector, HTTP API and optional PDU poller.
``c2ms sim ...``     fleet simulation and benchmarks (also installed as ``sim``).

Every config-file key has a flag of the same name; flags win over the
file and ``C2MS_AGGREGATOR`` wins over both for the agent's target.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time

from . import __version__, report
from .agent import Agent, AgentConfig
from .aggregator import Aggregator, UdpListener, parse_rack_layout
from .api import ApiConfig, ApiService
from .config import ConfigError, merge, parse_address, parse_config_file
from .control import ControlEngine, LocalTransport, SshTransport
from .pdu import PduClient, PduPoller, PduSimulator, parse_pdu_mapping
from .registry import CloudletRegistry
from .rrd import SeriesStore
from .sim import SimStack, bench_control, bench_query, parse_profile, spawn_agents, wait_for_fleet

log = logging.getLogger(__name__)


def _setup_logging(verbose: bool):
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="[%(asctime)s] %(levelname)s %(name)s: %(message)s",
    )


def _install_stop_handler() -> threading.Event:
    """Arm SIGINT/SIGTERM before any slow startup work begins."""
    stop = threading.Event()

    def handler(signum, frame):
        stop.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            signal.signal(sig, handler)
        except ValueError:
            pass  # not the main thread (tests)
    return stop


def _wait_for(stop: threading.Event):
    while not stop.is_set():
        stop.wait(1.0)


def _file_values(path: str | None) -> dict[str, str]:
    return parse_config_file(path) if path else {}


# -- c2ms agent -----------------------------------------------------------------


def cmd_agent(args) -> int:
    stop = _install_stop_handler()
    values = merge(
        _file_values(args.config),
        {
            "aggregator": args.aggregator,
            "heartbeat_interval": args.heartbeat_interval,
            "metric_interval": args.metric_interval,
            "hostname": args.hostname,
            "collectors": args.collectors,
        },
    )
    env_aggregator = os.environ.get("C2MS_AGGREGATOR")
    if env_aggregator:
        values["aggregator"] = env_aggregator
    if "aggregator" not in values:
        raise ConfigError("an aggregator address is required (flag, config file or C2MS_AGGREGATOR)")

    config = AgentConfig(
        aggregator=parse_address(values["aggregator"]),
        heartbeat_interval=float(values.get("heartbeat_interval", 5)),
        metric_interval=float(values.get("metric_interval", 15)),
        hostname=values.get("hostname") or None,
        collectors=tuple(c.strip() for c in values.get("collectors", "core").split(",") if c.strip()),
    )
    agent = Agent(config)
    agent.start()
    log.info("agent %s -> %s:%d (beat %gs, metrics %gs)", agent.hostname,
             *config.aggregator, config.heartbeat_interval, config.metric_interval)
    _wait_for(stop)
    agent.stop(timeout=5)
    return 0


# -- c2ms aggregator ---------------------------------------------------------------


def cmd_aggregator(args) -> int:
    stop = _install_stop_handler()
    values = merge(
        _file_values(args.config),
        {
            "listen": args.listen,
            "http": args.http,
            "clusters": args.clusters,
            "credentials": args.credentials,
            "rack_layout": args.rack_layout,
            "pdu_map": args.pdu_map,
            "pdu_addr": args.pdu_addr,
            "pdu_poll_interval": args.pdu_poll_interval,
            "palette": args.palette,
            "static_dir": args.static_dir,
            "snapshot": args.snapshot,
            "snapshot_interval": args.snapshot_interval,
            "down_threshold": args.down_threshold,
            "transport": args.transport,
            "ssh_user": args.ssh_user,
            "ssh_identity": args.ssh_identity,
        },
    )
    if args.allow_all_scope:
        values["allow_all_scope"] = "true"

    snapshot_path = values.get("snapshot")
    store = SeriesStore()
    if snapshot_path and os.path.exists(snapshot_path):
        store = SeriesStore.load_snapshot(snapshot_path)
        log.info("warm start from %s (%d series)", snapshot_path, len(store.keys()))

    clusters_path = values.get("clusters", "./data/clusters")
    os.makedirs(os.path.dirname(clusters_path) or ".", exist_ok=True)
    registry = CloudletRegistry(path=clusters_path)

    aggregator = Aggregator(
        store=store,
        registry=registry,
        down_threshold=float(values.get("down_threshold", 20.0)),
    )
    listener = UdpListener(aggregator, parse_address(values.get("listen", "0.0.0.0:8649"))).start()

    if values.get("transport", "ssh") == "local":
        transport = LocalTransport()
    else:
        transport = SshTransport(user=values.get("ssh_user") or None,
                                 identity=values.get("ssh_identity") or None)
    engine = ControlEngine(transport=transport)

    rack_layout = parse_rack_layout(values["rack_layout"]) if values.get("rack_layout") else None
    api_config = ApiConfig(
        listen=parse_address(values.get("http", "0.0.0.0:8650")),
        credentials_path=values.get("credentials", "./data/credentials"),
        allow_all_scope=values.get("allow_all_scope", "false").lower() in ("1", "true", "yes"),
        rack_layout=rack_layout,
        palette_path=values.get("palette") or None,
        static_dir=values.get("static_dir") or None,
    )
    creds_dir = os.path.dirname(api_config.credentials_path)
    if creds_dir:
        os.makedirs(creds_dir, exist_ok=True)
    api = ApiService(aggregator, engine, api_config).start()

    poller = None
    if values.get("pdu_map") and values.get("pdu_addr"):
        poller = PduPoller(
            aggregator,
            parse_pdu_mapping(values["pdu_map"]),
            PduClient(parse_address(values["pdu_addr"])),
            interval=float(values.get("pdu_poll_interval", 30)),
        ).start()

    snapshotter = None
    if snapshot_path:
        interval = float(values.get("snapshot_interval", 60))
        stop_snap = threading.Event()

        def snapshot_loop():
            while not stop_snap.wait(interval):
                try:
                    store.save_snapshot(snapshot_path)
                except OSError as exc:
                    log.warning("snapshot failed: %s", exc)

        snapshotter = (threading.Thread(target=snapshot_loop, daemon=True), stop_snap)
        snapshotter[0].start()

    log.info("udp listener on %s:%d", *listener.address)
    log.info("http api on %s:%d", *api.address)
    _wait_for(stop)

    if snapshotter:
        snapshotter[1].set()
        store.save_snapshot(snapshot_path)
    if poller:
        poller.stop()
    api.stop()
    listener.stop()
    return 0


# -- sim ---------------------------------------------------------------------------


def cmd_sim_agents(args) -> int:
    stop = _install_stop_handler()
    fleet = spawn_agents(
        count=args.count,
        profile=parse_profile(args.profile),
        aggregator_addr=parse_address(args.aggregator),
        seed=args.seed,
        heartbeat_interval=args.heartbeat_interval,
        metric_interval=args.metric_interval,
    )
    log.info("%d simulated agents -> %s (profile %s, seed %d)",
             args.count, args.aggregator, args.profile, args.seed)
    _wait_for(stop)
    fleet.stop()
    return 0


def cmd_sim_bench_query(args) -> int:
    counts = sorted({int(c) for c in args.counts.split(",") if c.strip()})
    stack = SimStack().start()
    fleet = spawn_agents(
        count=max(counts),
        profile=parse_profile(args.profile),
        aggregator_addr=stack.udp_address,
        seed=args.seed,
        heartbeat_interval=args.heartbeat_interval,
        metric_interval=args.metric_interval,
    )
    try:
        came_up = wait_for_fleet(stack, fleet.hostnames, timeout=4 * args.heartbeat_interval + 30)
        log.info("%d agents up after %.1fs; warming archives for %.0fs",
                 max(counts), came_up, args.warmup)
        time.sleep(args.warmup)
        reports = bench_query(stack, fleet.hostnames, counts,
                              repetitions=args.reps, window_s=args.window)
    finally:
        fleet.stop()
        stack.stop()
    print(report.emit_query_report(reports, args.out, plot=not args.no_plot))
    if args.out:
        log.info("report written to %s", args.out)
    return 0


def cmd_sim_bench_control(args) -> int:
    serial, parallel, speedup = bench_control(
        host_count=args.hosts,
        task_duration_s=args.task_secs,
        repetitions=args.reps,
        fanout_limit=args.fanout,
    )
    print(report.emit_control_report(serial, parallel, speedup, args.out, plot=not args.no_plot))
    if args.out:
        log.info("report written to %s", args.out)
    return 0


def cmd_sim_pdu(args) -> int:
    stop = _install_stop_handler()
    sim = PduSimulator(parse_address(args.listen), watts_per_outlet=args.watts_per_outlet).start()
    log.info("pdu simulator on %s:%d (%g W per outlet)", *sim.address, args.watts_per_outlet)
    _wait_for(stop)
    sim.stop()
    return 0


# -- parsers ---------------------------------------------------------------------


def _add_sim_subcommands(sim_parser: argparse.ArgumentParser):
    sub = sim_parser.add_subparsers(dest="sim_command", required=True)

    agents = sub.add_parser("agents", help="run a fleet of simulated agents")
    agents.add_argument("--count", type=int, required=True)
    agents.add_argument("--profile", default="constant:10")
    agents.add_argument("--seed", type=int, default=0)
    agents.add_argument("--aggregator", required=True)
    agents.add_argument("--heartbeat-interval", type=float, default=5.0)
    agents.add_argument("--metric-interval", type=float, default=15.0)
    agents.set_defaults(func=cmd_sim_agents)

    bench = sub.add_parser("bench", help="run a benchmark scenario")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)

    query = bench_sub.add_parser("query", help="stacked-series query latency sweep")
    query.add_argument("--counts", default=",".join(str(c) for c in range(10, 131, 10)))
    query.add_argument("--reps", type=int, default=15)
    query.add_argument("--out", default=None, help="write JSONL (and .png) report here")
    query.add_argument("--profile", default="constant:10")
    query.add_argument("--seed", type=int, default=0)
    query.add_argument("--heartbeat-interval", type=float, default=5.0)
    query.add_argument("--metric-interval", type=float, default=15.0)
    query.add_argument("--warmup", type=float, default=35.0, help="seconds of agent output before timing")
    query.add_argument("--window", type=float, default=3600.0, help="query window size in seconds")
    query.add_argument("--no-plot", action="store_true")
    query.set_defaults(func=cmd_sim_bench_query)

    control = bench_sub.add_parser("control", help="serial vs parallel command speedup")
    control.add_argument("--hosts", type=int, required=True)
    control.add_argument("--task-secs", type=float, default=1.0)
    control.add_argument("--reps", type=int, default=5)
    control.add_argument("--fanout", type=int, default=None)
    control.add_argument("--out", default=None)
    control.add_argument("--no-plot", action="store_true")
    control.set_defaults(func=cmd_sim_bench_control)

    pdu = sub.add_parser("pdu", help="run the PDU simulator")
    pdu.add_argument("--watts-per-outlet", type=float, default=150.0)
    pdu.add_argument("--listen", default="127.0.0.1:9460")
    pdu.set_defaults(func=cmd_sim_pdu)


def build_sim_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sim", description="fleet simulation and benchmarks")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    _add_sim_subcommands(parser)
    return parser


def build_main_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="c2ms",
                                     description="monitoring and control for dynamic server groups")
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    agent = sub.add_parser("agent", help="run the per-host metrics agent")
    agent.add_argument("--config", default=None, help="key = value config file")
    agent.add_argument("--aggregator", default=None, help="host:port of the aggregator")
    agent.add_argument("--heartbeat-interval", dest="heartbeat_interval", default=None)
    agent.add_argument("--metric-interval", dest="metric_interval", default=None)
    agent.add_argument("--hostname", default=None)
    agent.add_argument("--collectors", default=None, help="comma list: core,temperature")
    agent.set_defaults(func=cmd_agent)

    aggregator = sub.add_parser("aggregator", help="run the collector and HTTP API")
    aggregator.add_argument("--config", default=None)
    aggregator.add_argument("--listen", default=None, help="UDP listen address (default 0.0.0.0:8649)")
    aggregator.add_argument("--http", default=None, help="HTTP listen address (default 0.0.0.0:8650)")
    aggregator.add_argument("--clusters", default=None, help="clusters file path")
    aggregator.add_argument("--credentials", default=None)
    aggregator.add_argument("--rack-layout", dest="rack_layout", default=None)
    aggregator.add_argument("--pdu-map", dest="pdu_map", default=None)
    aggregator.add_argument("--pdu-addr", dest="pdu_addr", default=None)
    aggregator.add_argument("--pdu-poll-interval", dest="pdu_poll_interval", default=None)
    aggregator.add_argument("--palette", default=None)
    aggregator.add_argument("--static-dir", dest="static_dir", default=None)
    aggregator.add_argument("--snapshot", default=None)
    aggregator.add_argument("--snapshot-interval", dest="snapshot_interval", default=None)
    aggregator.add_argument("--down-threshold", dest="down_threshold", default=None)
    aggregator.add_argument("--transport", choices=["ssh", "local"], default=None)
    aggregator.add_argument("--ssh-user", dest="ssh_user", default=None)
    aggregator.add_argument("--ssh-identity", dest="ssh_identity", default=None)
    aggregator.add_argument("--allow-all-scope", action="store_true")
    aggregator.set_defaults(func=cmd_aggregator)

    sim = sub.add_parser("sim", help="fleet simulation and benchmarks")
    _add_sim_subcommands(sim)

    return parser


def _run(parser: argparse.ArgumentParser, argv) -> int:
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130


def main(argv=None) -> int:
    return _run(build_main_parser(), argv)


def sim_main(argv=None) -> int:
    return _run(build_sim_parser(), argv)


if __name__ == "__main__":
    sys.exit(main())
