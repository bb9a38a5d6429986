"""Power-distribution-unit polling.

Power is collected centrally: the aggregator asks each PDU for the watts
drawn on every outlet that the administrator mapped to a host.  Vendors
all speak different protocols, so this module speaks a deliberately
trivial line protocol and ships a simulator that speaks it too:

    client: GET <pdu_id> <outlet>\n
    server: <watts>\n            on success
    server: ERR <reason>\n       per-outlet failure

Polled watts are recorded exactly like agent metrics (metric name
``power_watts``), so per-cloudlet power aggregation falls out of the
ordinary stacked-series path with no extra code.
"""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
import time
from dataclasses import dataclass

from . import protocol
from .agent import MetricSample

log = logging.getLogger(__name__)

POWER_METRIC = "power_watts"
DEFAULT_POLL_INTERVAL = 30.0


class PduError(Exception):
    pass


class PduUnreachable(PduError):
    pass


class MappingParseError(PduError):
    pass


@dataclass(frozen=True)
class PduOutlet:
    hostname: str
    mac: str
    pdu_id: str
    outlet: int


@dataclass(frozen=True)
class PduMapping:
    entries: tuple[PduOutlet, ...]


def parse_pdu_mapping(path: str) -> PduMapping:
    """Mapping file: ``hostname mac pdu_id outlet`` whitespace-separated."""
    entries: list[PduOutlet] = []
    seen_hosts: set[str] = set()
    seen_outlets: set[tuple[str, int]] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise MappingParseError(f"{path}:{line_no}: expected 'hostname mac pdu_id outlet'")
            hostname, mac, pdu_id, outlet_s = parts
            if not protocol.valid_hostname(hostname):
                raise MappingParseError(f"{path}:{line_no}: bad hostname {hostname!r}")
            try:
                outlet = int(outlet_s)
            except ValueError as exc:
                raise MappingParseError(f"{path}:{line_no}: bad outlet {outlet_s!r}") from exc
            if outlet < 1:
                raise MappingParseError(f"{path}:{line_no}: outlet must be positive")
            if hostname in seen_hosts:
                raise MappingParseError(f"{path}:{line_no}: host {hostname} mapped twice")
            if (pdu_id, outlet) in seen_outlets:
                raise MappingParseError(f"{path}:{line_no}: outlet {pdu_id}/{outlet} mapped twice")
            seen_hosts.add(hostname)
            seen_outlets.add((pdu_id, outlet))
            entries.append(PduOutlet(hostname, mac, pdu_id, outlet))
    return PduMapping(tuple(entries))


class PduClient:
    def __init__(self, address: tuple[str, int], timeout: float = 2.0):
        self.address = address
        self.timeout = timeout

    def read_outlets(self, entries) -> dict[PduOutlet, float]:
        """One connection, one GET per mapped outlet.

        Raises PduUnreachable when the PDU endpoint cannot be reached at
        all; an ERR reply drops just that outlet from the result.
        """
        try:
            conn = socket.create_connection(self.address, timeout=self.timeout)
        except OSError as exc:
            raise PduUnreachable(f"pdu endpoint {self.address}: {exc}") from exc
        readings: dict[PduOutlet, float] = {}
        try:
            fh = conn.makefile("rw", encoding="ascii", newline="\n")
            for entry in entries:
                fh.write(f"GET {entry.pdu_id} {entry.outlet}\n")
                fh.flush()
                reply = fh.readline().strip()
                if not reply or reply.startswith("ERR"):
                    log.warning("pdu %s outlet %d: %s", entry.pdu_id, entry.outlet, reply or "no reply")
                    continue
                try:
                    readings[entry] = float(reply)
                except ValueError:
                    log.warning("pdu %s outlet %d: garbage reply %r", entry.pdu_id, entry.outlet, reply)
        except OSError as exc:
            raise PduUnreachable(f"pdu endpoint {self.address}: {exc}") from exc
        finally:
            conn.close()
        return readings


class PduPoller:
    """Periodically reads every mapped outlet into the aggregator."""

    def __init__(self, aggregator, mapping: PduMapping, client: PduClient,
                 interval: float = DEFAULT_POLL_INTERVAL, clock=time.time):
        self.aggregator = aggregator
        self.mapping = mapping
        self.client = client
        self.interval = interval
        self.clock = clock
        self.polls_failed = 0
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def poll_once(self) -> list[MetricSample]:
        try:
            readings = self.client.read_outlets(self.mapping.entries)
        except PduUnreachable as exc:
            self.polls_failed += 1
            log.warning("pdu poll skipped: %s", exc)
            return []
        now = self.clock()
        samples = []
        for entry, watts in readings.items():
            sample = MetricSample(entry.hostname, POWER_METRIC, watts, "W", timestamp=now)
            self.aggregator.record_sample(entry.hostname, POWER_METRIC, now, watts, "W")
            samples.append(sample)
        return samples

    def start(self) -> "PduPoller":
        self._thread = threading.Thread(target=self._run, name="pdu-poller", daemon=True)
        self._thread.start()
        return self

    def _run(self):
        while not self._stop.is_set():
            self.poll_once()
            self._stop.wait(self.interval)

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)


class PduSimulator:
    """Line-protocol PDU stand-in for tests and demos."""

    def __init__(self, address: tuple[str, int] = ("127.0.0.1", 0), watts_per_outlet: float = 150.0):
        self.watts_per_outlet = watts_per_outlet
        self.outlet_watts: dict[tuple[str, int], float] = {}
        self.failing_outlets: set[tuple[str, int]] = set()
        sim = self

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                for raw in self.rfile:
                    parts = raw.decode("ascii", "replace").split()
                    if len(parts) != 3 or parts[0] != "GET":
                        self.wfile.write(b"ERR bad request\n")
                        continue
                    try:
                        key = (parts[1], int(parts[2]))
                    except ValueError:
                        self.wfile.write(b"ERR bad outlet\n")
                        continue
                    if key in sim.failing_outlets:
                        self.wfile.write(b"ERR outlet fault\n")
                        continue
                    watts = sim.outlet_watts.get(key, sim.watts_per_outlet)
                    self.wfile.write(f"{watts}\n".encode("ascii"))

        self._server = socketserver.ThreadingTCPServer(address, Handler, bind_and_activate=True)
        self._server.daemon_threads = True
        self.address = self._server.server_address
        self._thread: threading.Thread | None = None

    def start(self) -> "PduSimulator":
        self._thread = threading.Thread(target=self._server.serve_forever, name="pdu-sim", daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=2)
