"""Per-host agent: samples local resources and streams them to the aggregator.

The agent is deliberately dumb.  It knows one address (the aggregator),
beats a heartbeat every few seconds, and sends one UDP datagram per
metric on a slower cadence.  It keeps no history (memory is bounded by
the current sample set) and has no idea that cloudlets exist, which is
exactly why hosts can be regrouped without ever touching an agent.

Counter-backed metrics (CPU time, interface byte counts) are emitted as
rates computed from two consecutive raw readings; the first tick after
start emits no rate.
"""

from __future__ import annotations

import glob
import logging
import os
import socket
import threading
import time
from dataclasses import dataclass, field

from . import protocol
from .protocol import Slope

log = logging.getLogger(__name__)

DEFAULT_HEARTBEAT_INTERVAL = 5.0
DEFAULT_METRIC_INTERVAL = 15.0
THERMAL_ZONE_GLOB = "/sys/class/thermal/thermal_zone*/temp"
CPU_TEMP_MIN, CPU_TEMP_MAX = 0.0, 150.0


class CollectorError(Exception):
    pass


class SensorUnavailable(CollectorError):
    pass


@dataclass(frozen=True)
class MetricSample:
    hostname: str
    metric: str
    value: float
    units: str = ""
    slope: Slope = Slope.BOTH
    timestamp: float | None = None  # None: stamped when sent


@dataclass
class AgentConfig:
    aggregator: tuple[str, int]
    heartbeat_interval: float = DEFAULT_HEARTBEAT_INTERVAL
    metric_interval: float = DEFAULT_METRIC_INTERVAL
    hostname: str | None = None
    collectors: tuple[str, ...] = ("core",)

    def __post_init__(self):
        if self.heartbeat_interval < 1:
            raise ValueError("heartbeat_interval must be >= 1 s")
        if self.metric_interval < self.heartbeat_interval:
            raise ValueError("metric_interval must be >= heartbeat_interval")


def _bucket_cpu_fields(times) -> tuple[float, float, float]:
    """Split psutil cpu_times fields into user/system/idle totals."""
    user = idle = system = 0.0
    for name in times._fields:
        v = getattr(times, name)
        if name in ("user", "nice", "guest", "guest_nice"):
            user += v
        elif name in ("idle", "iowait"):
            idle += v
        else:
            system += v
    return user, system, idle


class CoreCollector:
    """CPU, load, memory and network-rate metrics from the local OS."""

    name = "core"

    def __init__(self, hostname: str):
        self.hostname = hostname
        self.errors = 0
        self._prev_cpu = None
        self._prev_net = None
        self._prev_net_time = None

    def collect(self, now: float | None = None) -> list[MetricSample]:
        import psutil

        now = time.time() if now is None else now
        samples: list[MetricSample] = []

        def emit(metric, value, units="", slope=Slope.BOTH):
            samples.append(MetricSample(self.hostname, metric, float(value), units, slope))

        try:
            cpu = psutil.cpu_times()
            if self._prev_cpu is not None:
                u0, s0, i0 = _bucket_cpu_fields(self._prev_cpu)
                u1, s1, i1 = _bucket_cpu_fields(cpu)
                total = (u1 - u0) + (s1 - s0) + (i1 - i0)
                if total > 0:
                    emit("cpu_user", 100.0 * (u1 - u0) / total, "%")
                    emit("cpu_system", 100.0 * (s1 - s0) / total, "%")
                    emit("cpu_idle", 100.0 * (i1 - i0) / total, "%")
            self._prev_cpu = cpu
        except Exception:
            self.errors += 1
            log.exception("cpu sampling failed")

        try:
            emit("load_one", os.getloadavg()[0])
        except OSError:
            self.errors += 1

        try:
            vm = psutil.virtual_memory()
            emit("mem_total", vm.total / 1024.0, "KB", Slope.ZERO)
            emit("mem_free", vm.free / 1024.0, "KB")
        except Exception:
            self.errors += 1
            log.exception("memory sampling failed")

        try:
            net = psutil.net_io_counters()
            if self._prev_net is not None:
                elapsed = now - self._prev_net_time
                d_in = net.bytes_recv - self._prev_net.bytes_recv
                d_out = net.bytes_sent - self._prev_net.bytes_sent
                if elapsed > 0 and d_in >= 0 and d_out >= 0:  # skip counter wrap
                    emit("bytes_in", d_in / elapsed, "B/s")
                    emit("bytes_out", d_out / elapsed, "B/s")
            self._prev_net = net
            self._prev_net_time = now
        except Exception:
            self.errors += 1
            log.exception("network sampling failed")

        try:
            emit("cpu_num", float(psutil.cpu_count() or os.cpu_count() or 1), "", Slope.ZERO)
        except Exception:
            self.errors += 1

        return samples


class TemperatureCollector:
    """CPU package temperature from a sensor file, degrees Celsius.

    The stock Linux thermal-zone files report millidegrees, hence the
    0.001 scale when the path is discovered rather than given.  Values
    outside [0, 150] C and unreadable sensors degrade to an omitted
    metric; the agent keeps running.
    """

    name = "temperature"

    def __init__(self, hostname: str, path: str | None = None, scale: float | None = None):
        self.hostname = hostname
        if path is None:
            zones = sorted(glob.glob(THERMAL_ZONE_GLOB))
            path = zones[0] if zones else None
            scale = 0.001 if scale is None else scale
        self.path = path
        self.scale = 1.0 if scale is None else scale
        self.unavailable_count = 0

    def collect(self, now: float | None = None) -> list[MetricSample]:
        if self.path is None:
            self.unavailable_count += 1
            raise SensorUnavailable("no temperature sensor found")
        try:
            with open(self.path, encoding="ascii") as fh:
                raw = float(fh.read().strip())
        except (OSError, ValueError) as exc:
            self.unavailable_count += 1
            raise SensorUnavailable(f"sensor {self.path}: {exc}") from exc
        celsius = raw * self.scale
        if not CPU_TEMP_MIN <= celsius <= CPU_TEMP_MAX:
            self.unavailable_count += 1
            raise SensorUnavailable(f"sensor {self.path}: {celsius} C out of range")
        return [MetricSample(self.hostname, "cpu_temp", celsius, "C")]


@dataclass
class AgentStats:
    heartbeats_sent: int = 0
    metrics_sent: int = 0
    send_errors: int = 0
    collector_errors: int = 0
    loop_iterations: int = 0


class Agent:
    """One sampling/transmit loop; many instances may share a process."""

    def __init__(self, config: AgentConfig, collectors=None, clock=time.time):
        self.config = config
        self.hostname = config.hostname or socket.gethostname()
        if collectors is None:
            collectors = build_collectors(config.collectors, self.hostname)
        self.collectors = collectors
        self.clock = clock
        self.stats = AgentStats()
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None
        self._sock: socket.socket | None = None

    def start(self) -> "Agent":
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._thread = threading.Thread(target=self.run, name=f"agent-{self.hostname}", daemon=True)
        self._thread.start()
        return self

    def stop(self, timeout: float | None = None):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout)
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    @property
    def thread_ident(self):
        return self._thread.ident if self._thread else None

    def is_running(self) -> bool:
        return self._thread is not None and self._thread.is_alive()

    def _send(self, datagram: protocol.Datagram) -> bool:
        try:
            self._sock.sendto(protocol.encode(datagram), self.config.aggregator)
            return True
        except OSError as exc:
            # UDP is fire-and-forget; failures are logged and retried next tick
            self.stats.send_errors += 1
            log.warning("send to %s failed: %s", self.config.aggregator, exc)
            return False

    def send_heartbeat(self):
        if self._send(protocol.heartbeat(self.hostname, int(self.clock()))):
            self.stats.heartbeats_sent += 1

    def send_metrics(self):
        now = self.clock()
        for collector in self.collectors:
            try:
                samples = collector.collect(now)
            except CollectorError as exc:
                self.stats.collector_errors += 1
                log.debug("%s collector: %s", getattr(collector, "name", "?"), exc)
                continue
            for s in samples:
                ts = int(s.timestamp if s.timestamp is not None else now)
                d = protocol.metric(s.hostname, ts, s.metric, s.value, s.units, s.slope)
                if self._send(d):
                    self.stats.metrics_sent += 1

    def run(self):
        if self._sock is None:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        next_heartbeat = next_metrics = self.clock()
        while not self._stop.is_set():
            now = self.clock()
            if now >= next_heartbeat:
                self.send_heartbeat()
                while next_heartbeat <= now:
                    next_heartbeat += self.config.heartbeat_interval
            if now >= next_metrics:
                self.send_metrics()
                while next_metrics <= now:
                    next_metrics += self.config.metric_interval
            self.stats.loop_iterations += 1
            wake = min(next_heartbeat, next_metrics)
            self._stop.wait(timeout=max(0.0, wake - self.clock()))


def build_collectors(names, hostname: str) -> list:
    collectors = []
    for name in names:
        if name == "core":
            collectors.append(CoreCollector(hostname))
        elif name == "temperature":
            collectors.append(TemperatureCollector(hostname))
        else:
            raise ValueError(f"unknown collector {name!r}")
    return collectors
