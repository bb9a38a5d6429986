import math
import random
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from c2ms import protocol
from c2ms.protocol import (
    Datagram,
    Kind,
    MalformedError,
    MetricPayload,
    OversizeError,
    InvariantError,
    Slope,
    decode,
    encode,
    heartbeat,
    metric,
)

hostnames = st.text(min_size=1, max_size=40).filter(
    lambda s: protocol.valid_hostname(s) and len(s.encode("utf-8")) <= 255
)
metric_names = st.text(alphabet="abcdefghijklmnopqrstuvwxyz0123456789_", min_size=1, max_size=127)
units = st.text(max_size=10).filter(lambda s: len(s.encode("utf-8")) <= 31)
timestamps = st.integers(min_value=0, max_value=2**64 - 1)
finite_floats = st.floats(allow_nan=False, allow_infinity=False)


@st.composite
def datagrams(draw):
    host = draw(hostnames)
    ts = draw(timestamps)
    if draw(st.booleans()):
        return heartbeat(host, ts)
    return metric(
        host,
        ts,
        draw(metric_names),
        draw(finite_floats),
        draw(units),
        draw(st.sampled_from(list(Slope))),
    )


def test_header_layout():
    data = encode(heartbeat("node01", 1700000000))
    assert data[:6] == bytes([0x43, 0x32, 0x4D, 0x53, 0x01, 0x00])
    assert data[6] == 6  # hostname length
    assert data[7:13] == b"node01"
    assert struct.unpack(">Q", data[13:21])[0] == 1700000000
    assert len(data) == 21


def test_metric_round_trip():
    d = metric("node01", 1700000000, "cpu_user", 12.5, "%", Slope.BOTH)
    assert decode(encode(d)) == d


def test_oversize_hostname():
    with pytest.raises(OversizeError):
        encode(heartbeat("h" * 300, 0))


def test_oversize_metric_name_and_units():
    with pytest.raises(OversizeError):
        encode(metric("n", 0, "m" * 128, 1.0))
    with pytest.raises(OversizeError):
        encode(metric("n", 0, "m", 1.0, units="u" * 32))


@pytest.mark.parametrize(
    "bad",
    [
        heartbeat("", 0),
        heartbeat("two words", 0),
        heartbeat("tab\there", 0),
        heartbeat("ctl\x01", 0),
        metric("n", 0, "BadName", 1.0),
        metric("n", 0, "ok", float("nan")),
        metric("n", 0, "ok", float("inf")),
        Datagram(Kind.HEARTBEAT, "n", 0, MetricPayload("x", 1.0)),
        Datagram(Kind.METRIC, "n", 0, None),
        heartbeat("n", -1),
        heartbeat("n", 2**64),
    ],
)
def test_invariant_violations_rejected(bad):
    with pytest.raises(InvariantError):
        encode(bad)


def test_empty_bytes_malformed():
    with pytest.raises(MalformedError):
        decode(b"")


@pytest.mark.parametrize(
    "data",
    [
        b"XXXX\x01\x00\x01n" + b"\x00" * 8,          # bad magic
        b"C2MS\x02\x00\x01n" + b"\x00" * 8,          # bad version
        b"C2MS\x01\x05\x01n" + b"\x00" * 8,          # bad kind
        b"C2MS\x01\x00\x01n" + b"\x00" * 7,          # truncated timestamp
        b"C2MS\x01\x00\x02\xff\xfe" + b"\x00" * 8,   # invalid utf-8 hostname
        b"C2MS\x01\x00\x01n" + b"\x00" * 8 + b"!",   # trailing garbage
    ],
)
def test_malformed_shapes(data):
    with pytest.raises(MalformedError):
        decode(data)


def test_nan_on_wire_malformed():
    data = bytearray(encode(metric("n", 0, "m", 1.0)))
    # value field sits right after the one-byte name
    off = 4 + 3 + 1 + 8 + 1 + 1
    data[off : off + 8] = struct.pack(">d", float("nan"))
    with pytest.raises(MalformedError):
        decode(bytes(data))


@given(datagrams())
@settings(max_examples=300)
def test_round_trip_property(d):
    assert decode(encode(d)) == d


@given(datagrams())
@settings(max_examples=100)
def test_encode_deterministic(d):
    assert encode(d) == encode(d)
    assert len(encode(d)) <= protocol.MAX_DATAGRAM


def test_fuzz_totality():
    """Random byte strings never crash the decoder: Datagram or MalformedError."""
    rng = random.Random(0xC2B5)
    decoded = 0
    for _ in range(10_000):
        n = rng.randrange(0, 64)
        blob = rng.randbytes(n)
        if rng.random() < 0.3:
            # bias some inputs toward near-valid packets
            blob = b"C2MS" + blob
        try:
            d = decode(blob)
            decoded += 1
            # anything decoded must satisfy invariants: re-encoding is legal
            assert decode(encode(d)) == d
        except MalformedError:
            pass
    assert decoded >= 0  # totality itself is the assertion


def test_mutation_fuzz():
    """Bit-flipped valid packets either still parse or fail cleanly."""
    rng = random.Random(7)
    base = encode(metric("node01", 1700000000, "cpu_user", 12.5, "%", Slope.POSITIVE))
    for _ in range(2_000):
        blob = bytearray(base)
        for _ in range(rng.randrange(1, 4)):
            blob[rng.randrange(len(blob))] ^= 1 << rng.randrange(8)
        try:
            d = decode(bytes(blob))
            assert decode(encode(d)) == d
        except MalformedError:
            pass
