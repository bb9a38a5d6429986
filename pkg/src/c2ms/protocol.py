"""Datagram format spoken between agents and the aggregator.

One datagram per UDP packet, big-endian throughout:

    magic[4]='C2MS' | version:u8 | kind:u8 | hostname_len:u8 |
    hostname[hostname_len] | timestamp:u64

kind 0 is a heartbeat and ends there.  kind 1 is a metric sample and
appends:

    name_len:u8 | name[name_len] | value:f64 | units_len:u8 |
    units[units_len] | slope:u8

Encoding is deterministic and capped at 512 bytes.  Decoding is total:
any byte string either yields a valid Datagram or raises MalformedError,
so a hostile or corrupted packet can never take the receiving daemon
down.
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass

MAGIC = b"C2MS"
VERSION = 1
MAX_DATAGRAM = 512
MAX_HOSTNAME = 255
MAX_METRIC_NAME = 127
MAX_UNITS = 31

_METRIC_NAME_CHARS = frozenset("abcdefghijklmnopqrstuvwxyz0123456789_")


class ProtocolError(Exception):
    """Base for encode/decode failures."""


class InvariantError(ProtocolError):
    """A field violates the format's value rules."""


class OversizeError(ProtocolError):
    """A field or the whole datagram exceeds its byte bound."""


class MalformedError(ProtocolError):
    """Bytes on the wire are not a valid datagram; drop and count."""


class Kind(enum.IntEnum):
    HEARTBEAT = 0
    METRIC = 1


class Slope(enum.IntEnum):
    """Gauge vs counter semantics of a metric."""

    ZERO = 0
    POSITIVE = 1
    BOTH = 2


@dataclass(frozen=True)
class MetricPayload:
    name: str
    value: float
    units: str = ""
    slope: Slope = Slope.BOTH


@dataclass(frozen=True)
class Datagram:
    kind: Kind
    hostname: str
    timestamp: int
    payload: MetricPayload | None = None


def heartbeat(hostname: str, timestamp: int) -> Datagram:
    return Datagram(Kind.HEARTBEAT, hostname, timestamp)


def metric(
    hostname: str,
    timestamp: int,
    name: str,
    value: float,
    units: str = "",
    slope: Slope = Slope.BOTH,
) -> Datagram:
    return Datagram(Kind.METRIC, hostname, timestamp, MetricPayload(name, value, units, slope))


def valid_hostname(hostname: str) -> bool:
    if not hostname:
        return False
    for ch in hostname:
        if ch.isspace() or ord(ch) < 0x20 or ord(ch) == 0x7F:
            return False
    return True


def valid_metric_name(name: str) -> bool:
    return bool(name) and all(ch in _METRIC_NAME_CHARS for ch in name)


def _check(datagram: Datagram) -> tuple[bytes, bytes, bytes]:
    """Validate fields; returns the UTF-8 forms of the variable parts."""
    if not isinstance(datagram.kind, Kind):
        raise InvariantError(f"bad kind {datagram.kind!r}")
    if not valid_hostname(datagram.hostname):
        raise InvariantError(f"bad hostname {datagram.hostname!r}")
    host_b = datagram.hostname.encode("utf-8")
    if len(host_b) > MAX_HOSTNAME:
        raise OversizeError(f"hostname is {len(host_b)} bytes, max {MAX_HOSTNAME}")
    if not 0 <= datagram.timestamp < 2**64:
        raise InvariantError(f"timestamp {datagram.timestamp} out of u64 range")

    if datagram.kind is Kind.HEARTBEAT:
        if datagram.payload is not None:
            raise InvariantError("heartbeat carries no payload")
        return host_b, b"", b""

    p = datagram.payload
    if p is None:
        raise InvariantError("metric datagram requires a payload")
    if not valid_metric_name(p.name):
        raise InvariantError(f"bad metric name {p.name!r}")
    name_b = p.name.encode("utf-8")
    if len(name_b) > MAX_METRIC_NAME:
        raise OversizeError(f"metric name is {len(name_b)} bytes, max {MAX_METRIC_NAME}")
    if not math.isfinite(p.value):
        raise InvariantError(f"metric value {p.value!r} is not finite")
    units_b = p.units.encode("utf-8")
    if len(units_b) > MAX_UNITS:
        raise OversizeError(f"units is {len(units_b)} bytes, max {MAX_UNITS}")
    if not isinstance(p.slope, Slope):
        raise InvariantError(f"bad slope {p.slope!r}")
    return host_b, name_b, units_b


def encode(datagram: Datagram) -> bytes:
    """Serialize a datagram; pure, deterministic, <= 512 bytes."""
    host_b, name_b, units_b = _check(datagram)
    parts = [
        MAGIC,
        struct.pack(">BBB", VERSION, int(datagram.kind), len(host_b)),
        host_b,
        struct.pack(">Q", datagram.timestamp),
    ]
    if datagram.kind is Kind.METRIC:
        p = datagram.payload
        parts.append(struct.pack(">B", len(name_b)))
        parts.append(name_b)
        parts.append(struct.pack(">d", p.value))
        parts.append(struct.pack(">B", len(units_b)))
        parts.append(units_b)
        parts.append(struct.pack(">B", int(p.slope)))
    out = b"".join(parts)
    if len(out) > MAX_DATAGRAM:
        raise OversizeError(f"encoded datagram is {len(out)} bytes, max {MAX_DATAGRAM}")
    return out


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise MalformedError("truncated datagram")
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def f64(self) -> float:
        return struct.unpack(">d", self.take(8))[0]

    def text(self, n: int) -> str:
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise MalformedError(f"bad utf-8: {exc}") from exc

    def done(self) -> bool:
        return self.pos == len(self.data)


def decode(data: bytes) -> Datagram:
    """Parse wire bytes back into a Datagram.

    Total over arbitrary input: raises MalformedError rather than ever
    crashing, and any Datagram returned satisfies all field invariants
    (so decode(encode(d)) == d and re-encoding is always legal).
    """
    if len(data) > MAX_DATAGRAM:
        raise MalformedError(f"datagram of {len(data)} bytes exceeds {MAX_DATAGRAM}")
    r = _Reader(bytes(data))
    if r.take(4) != MAGIC:
        raise MalformedError("bad magic")
    version = r.u8()
    if version != VERSION:
        raise MalformedError(f"unsupported version {version}")
    kind_raw = r.u8()
    if kind_raw not in (0, 1):
        raise MalformedError(f"unknown kind {kind_raw}")
    kind = Kind(kind_raw)
    hostname = r.text(r.u8())
    if not valid_hostname(hostname):
        raise MalformedError(f"bad hostname {hostname!r}")
    timestamp = r.u64()

    payload = None
    if kind is Kind.METRIC:
        name_len = r.u8()
        if name_len > MAX_METRIC_NAME:
            raise MalformedError(f"metric name of {name_len} bytes exceeds {MAX_METRIC_NAME}")
        name = r.text(name_len)
        if not valid_metric_name(name):
            raise MalformedError(f"bad metric name {name!r}")
        value = r.f64()
        if not math.isfinite(value):
            raise MalformedError("non-finite metric value")
        units_len = r.u8()
        if units_len > MAX_UNITS:
            raise MalformedError(f"units of {units_len} bytes exceeds {MAX_UNITS}")
        units = r.text(units_len)
        slope_raw = r.u8()
        if slope_raw not in (0, 1, 2):
            raise MalformedError(f"unknown slope {slope_raw}")
        payload = MetricPayload(name, value, units, Slope(slope_raw))

    if not r.done():
        raise MalformedError("trailing bytes after datagram")
    return Datagram(kind, hostname, timestamp, payload)
