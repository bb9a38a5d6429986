"""Central collector: ingests agent datagrams and answers fleet queries.

Hosts self-register by beating: the first heartbeat from an unknown
hostname creates its record and it shows up in the Initial pool.  A host
is "up" while its last heartbeat is no older than ``down_threshold``
(four missed beats by default); membership in a cloudlet is purely
administrative and survives downtime.

Group queries resolve their member set against the registry at query
time, every time.  Moving a host between cloudlets therefore changes the
very next query's layers, with no process anywhere restarting or being
told anything.

Stacked aggregation: the per-host series are aligned on a common slot
grid and summed per slot.  An Unknown layer value contributes zero to
the sum and decrements that slot's coverage count, so a renderer can
hatch incomplete slots instead of lying with a dip.
"""

from __future__ import annotations

import json
import logging
import socket
import threading
import time
from dataclasses import dataclass, field

from . import protocol
from .registry import CloudletRegistry, UnknownCloudlet, INITIAL
from .rrd import SeriesKey, SeriesStore, StaleSample, NonFiniteValue, UnknownSeries

log = logging.getLogger(__name__)

DEFAULT_DOWN_THRESHOLD = 4 * 5.0  # four missed heartbeats at the default beat


class AggregatorError(Exception):
    pass


class BadScope(AggregatorError):
    pass


class BadWindow(AggregatorError):
    pass


class LayoutParseError(AggregatorError):
    pass


@dataclass
class HostRecord:
    hostname: str
    first_seen: float
    last_heartbeat: float = 0.0
    latest: dict[str, tuple[float, float, str]] = field(default_factory=dict)


@dataclass
class StackedSeries:
    """Per-group metric summary: aligned layers plus their per-slot total."""

    metric: str
    step: int
    timestamps: list[int]
    layers: list[tuple[str, list[float | None]]]  # hostname-sorted
    sum: list[float]
    coverage: list[int]

    def to_json_dict(self) -> dict:
        return {
            "metric": self.metric,
            "step": self.step,
            "timestamps": list(self.timestamps),
            "layers": [{"host": h, "values": list(vs)} for h, vs in self.layers],
            "sum": list(self.sum),
            "coverage": list(self.coverage),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict())

    @classmethod
    def from_json_dict(cls, d: dict) -> "StackedSeries":
        return cls(
            metric=d["metric"],
            step=d["step"],
            timestamps=list(d["timestamps"]),
            layers=[(layer["host"], list(layer["values"])) for layer in d["layers"]],
            sum=list(d["sum"]),
            coverage=list(d["coverage"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "StackedSeries":
        return cls.from_json_dict(json.loads(text))


def parse_scope(scope: str) -> tuple[str, str | None]:
    """``host:<h>`` | ``cloudlet:<c>`` | ``all`` -> (kind, argument)."""
    if scope == "all":
        return "all", None
    kind, sep, arg = scope.partition(":")
    if sep and arg and kind in ("host", "cloudlet"):
        return kind, arg
    raise BadScope(f"scope must be host:<h>, cloudlet:<c> or all, got {scope!r}")


class Aggregator:
    def __init__(
        self,
        store: SeriesStore | None = None,
        registry: CloudletRegistry | None = None,
        down_threshold: float = DEFAULT_DOWN_THRESHOLD,
        clock=time.time,
    ):
        self.store = store if store is not None else SeriesStore()
        self.registry = registry if registry is not None else CloudletRegistry()
        self.down_threshold = down_threshold
        self.clock = clock
        self._hosts: dict[str, HostRecord] = {}
        self._lock = threading.RLock()
        self.malformed_dropped = 0
        self.stale_dropped = 0

    # -- ingest ------------------------------------------------------------

    def ingest(self, datagram: protocol.Datagram) -> None:
        now = self.clock()
        with self._lock:
            record = self._hosts.get(datagram.hostname)
            if record is None:
                record = HostRecord(hostname=datagram.hostname, first_seen=now)
                self._hosts[datagram.hostname] = record
            if datagram.kind is protocol.Kind.HEARTBEAT:
                record.last_heartbeat = max(record.last_heartbeat, now)
                return
        p = datagram.payload
        self.record_sample(datagram.hostname, p.name, datagram.timestamp, p.value, p.units)

    def ingest_bytes(self, data: bytes) -> None:
        try:
            self.ingest(protocol.decode(data))
        except protocol.MalformedError:
            self.malformed_dropped += 1

    def record_sample(self, hostname: str, metric: str, timestamp: float, value: float, units: str = "") -> None:
        """Store one sample; shared by agent ingest and the PDU poller."""
        with self._lock:
            record = self._hosts.get(hostname)
            if record is None:
                record = HostRecord(hostname=hostname, first_seen=self.clock())
                self._hosts[hostname] = record
            prev = record.latest.get(metric)
            if prev is None or timestamp >= prev[0]:
                record.latest[metric] = (timestamp, value, units)
        try:
            self.store.insert(SeriesKey(hostname, metric), timestamp, value)
        except StaleSample:
            self.stale_dropped += 1
        except NonFiniteValue:
            self.malformed_dropped += 1

    # -- host state ----------------------------------------------------------

    def known_hostnames(self) -> list[str]:
        with self._lock:
            return sorted(self._hosts)

    def host_record(self, hostname: str) -> HostRecord | None:
        with self._lock:
            return self._hosts.get(hostname)

    def is_up(self, hostname: str) -> bool:
        with self._lock:
            record = self._hosts.get(hostname)
        if record is None or record.last_heartbeat == 0.0:
            return False
        return self.clock() - record.last_heartbeat <= self.down_threshold

    def latest_value(self, hostname: str, metric: str) -> float | None:
        with self._lock:
            record = self._hosts.get(hostname)
            if record is None or metric not in record.latest:
                return None
            return record.latest[metric][1]

    # -- queries -------------------------------------------------------------

    def resolve_scope(self, scope: str) -> list[str]:
        kind, arg = parse_scope(scope)
        if kind == "all":
            return self.known_hostnames()
        if kind == "host":
            return [arg]
        if arg == INITIAL:
            return self.registry.initial_pool(self.known_hostnames())
        return self.registry.members(arg)  # raises UnknownCloudlet

    def aggregate(self, scope: str, metric: str, start: float, end: float) -> StackedSeries:
        if start >= end:
            raise BadWindow(f"start {start} must precede end {end}")
        members = sorted(set(self.resolve_scope(scope)))

        steps = []
        for hostname in members:
            step = self.store.choose_step(SeriesKey(hostname, metric), start)
            if step is not None:
                steps.append(step)
        step = max(steps) if steps else min(s.step for s in self.store._default_specs)

        first = int(start // step) * step
        timestamps = list(range(first, _grid_end(end, step), step))
        layers: list[tuple[str, list[float | None]]] = []
        for hostname in members:
            key = SeriesKey(hostname, metric)
            try:
                values = self.store.query(key, start, end, step=step).values()
            except UnknownSeries:
                values = [None] * len(timestamps)
            layers.append((hostname, values))

        sums = [0.0] * len(timestamps)
        coverage = [0] * len(timestamps)
        for _, values in layers:
            for i, v in enumerate(values):
                if v is not None:
                    sums[i] += v
                    coverage[i] += 1
        return StackedSeries(metric, step, timestamps, layers, sums, coverage)

    def cloudlet_summary(self, name: str) -> tuple[int, int, int]:
        """(hosts_up, hosts_down, cpus_total); CPUs counted on up hosts only."""
        if name == INITIAL:
            members = self.registry.initial_pool(self.known_hostnames())
        else:
            members = self.registry.members(name)
        up = down = cpus = 0
        for hostname in members:
            if self.is_up(hostname):
                up += 1
                cpu_num = self.latest_value(hostname, "cpu_num")
                cpus += int(cpu_num) if cpu_num is not None else 0
            else:
                down += 1
        return up, down, cpus

    def heatmap(self, layout: list[tuple[int, int, str]]) -> list[dict]:
        cells = []
        for row, col, hostname in layout:
            last = self.store.last(SeriesKey(hostname, "cpu_temp"))
            cells.append(
                {"row": row, "col": col, "host": hostname, "temp": last[1] if last else None}
            )
        return cells


def _grid_end(end: float, step: int) -> int:
    """Smallest grid point strictly past every slot intersecting [start, end)."""
    last_slot = int((end - 1e-9) // step) * step
    return last_slot + step


def parse_rack_layout(path: str) -> list[tuple[int, int, str]]:
    """Rack layout file: ``row,column,hostname`` per line, # comments."""
    layout: list[tuple[int, int, str]] = []
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if len(parts) != 3:
                raise LayoutParseError(f"{path}:{line_no}: expected row,column,hostname")
            try:
                row, col = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise LayoutParseError(f"{path}:{line_no}: bad coordinates") from exc
            if not protocol.valid_hostname(parts[2]):
                raise LayoutParseError(f"{path}:{line_no}: bad hostname {parts[2]!r}")
            layout.append((row, col, parts[2]))
    return layout


class UdpListener:
    """Receives agent datagrams on a UDP socket and feeds the aggregator."""

    def __init__(self, aggregator: Aggregator, address: tuple[str, int]):
        self.aggregator = aggregator
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.bind(address)
        self._sock.settimeout(0.2)
        self.address = self._sock.getsockname()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def start(self) -> "UdpListener":
        self._thread = threading.Thread(target=self._run, name="udp-listener", daemon=True)
        self._thread.start()
        return self

    def _run(self):
        while not self._stop.is_set():
            try:
                data, _ = self._sock.recvfrom(4096)
            except socket.timeout:
                continue
            except OSError:
                break
            self.aggregator.ingest_bytes(data)

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        self._sock.close()
