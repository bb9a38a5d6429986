"""Fixed-footprint round-robin time-series storage with consolidation.

Each (hostname, metric) series owns a ladder of archives.  An archive
divides time into fixed-width slots; raw samples accumulate into the
currently open slot and the slot is consolidated (average/max/last) when
the first sample lands past its boundary.  Consolidated rows live in a
circular buffer, so a series' memory footprint is fixed no matter how
long it runs: new rows overwrite the oldest.

A slot that saw no samples holds Unknown (None), never zero.  Zero-fill
is an aggregation policy, decided by the caller, not by storage.

The store is shared between the ingest path and the query path; all
public methods take an internal lock, callers need none of their own.
"""

from __future__ import annotations

import enum
import io
import math
import os
import struct
import threading
from collections import deque
from dataclasses import dataclass, field


class StoreError(Exception):
    pass


class StaleSample(StoreError):
    """Sample timestamp precedes the newest finalized slot; dropped."""


class NonFiniteValue(StoreError):
    pass


class UnknownSeries(StoreError):
    pass


class SnapshotFormatError(StoreError):
    pass


class ConsolidationFn(enum.IntEnum):
    AVERAGE = 0
    MAX = 1
    LAST = 2


@dataclass(frozen=True)
class ArchiveSpec:
    step: int
    rows: int
    cf: ConsolidationFn = ConsolidationFn.AVERAGE

    def __post_init__(self):
        if self.step < 1:
            raise ValueError(f"step must be >= 1, got {self.step}")
        if self.rows < 2:
            raise ValueError(f"rows must be >= 2, got {self.rows}")

    @property
    def retention(self) -> int:
        return self.step * self.rows


# One hour at fine resolution, one day consolidated.
DEFAULT_ARCHIVES = (
    ArchiveSpec(step=15, rows=240, cf=ConsolidationFn.AVERAGE),
    ArchiveSpec(step=300, rows=288, cf=ConsolidationFn.AVERAGE),
)


@dataclass(frozen=True)
class SeriesKey:
    hostname: str
    metric: str


@dataclass
class SeriesSlice:
    """Query result: consolidated points at a single step.

    points are (slot_start, value) pairs on a contiguous slot grid;
    value None means Unknown.
    """

    step: int
    points: list[tuple[int, float | None]] = field(default_factory=list)

    def values(self) -> list[float | None]:
        return [v for _, v in self.points]

    def slot_starts(self) -> list[int]:
        return [t for t, _ in self.points]


class RoundRobinArchive:
    """One consolidation level: open-slot accumulator plus a ring of rows."""

    def __init__(self, spec: ArchiveSpec):
        self.spec = spec
        self._rows: deque[tuple[int, float | None]] = deque(maxlen=spec.rows)
        self._open_start: int | None = None
        self._sum = 0.0
        self._count = 0
        self._max = 0.0
        self._last = 0.0
        self._last_ts = 0.0

    def _slot_of(self, timestamp: float) -> int:
        return int(timestamp // self.spec.step) * self.spec.step

    def _consolidate(self) -> float | None:
        if self._count == 0:
            return None
        cf = self.spec.cf
        if cf is ConsolidationFn.AVERAGE:
            return self._sum / self._count
        if cf is ConsolidationFn.MAX:
            return self._max
        return self._last

    def _finalize_open(self):
        self._rows.append((self._open_start, self._consolidate()))
        self._sum = 0.0
        self._count = 0
        self._max = 0.0
        self._last = 0.0
        self._last_ts = 0.0

    def insert(self, timestamp: float, value: float) -> bool:
        """Fold one sample in; False if stale for this archive."""
        slot = self._slot_of(timestamp)
        if self._open_start is None:
            self._open_start = slot
        elif slot < self._open_start:
            return False
        elif slot > self._open_start:
            self._finalize_open()
            # slots the stream skipped entirely are recorded as Unknown;
            # anything older than capacity would be overwritten anyway
            gap = (slot - self._open_start) // self.spec.step - 1
            for i in range(max(0, gap - self.spec.rows), gap):
                self._rows.append((self._open_start + (i + 1) * self.spec.step, None))
            self._open_start = slot

        self._sum += value
        self._count += 1
        if self._count == 1 or value > self._max:
            self._max = value
        if self._count == 1 or timestamp >= self._last_ts:
            self._last = value
            self._last_ts = timestamp
        return True

    def newest_time(self) -> int | None:
        """Exclusive end of the newest slot with any data."""
        if self._open_start is not None:
            return self._open_start + self.spec.step
        if self._rows:
            return self._rows[-1][0] + self.spec.step
        return None

    def covers(self, start: float) -> bool:
        newest = self.newest_time()
        if newest is None:
            return False
        return start >= newest - self.spec.retention

    def slice(self, start: float, end: float) -> SeriesSlice:
        step = self.spec.step
        finalized = dict(self._rows)
        first = int(start // step) * step
        points: list[tuple[int, float | None]] = []
        slot = first
        while slot < end:
            if slot in finalized:
                points.append((slot, finalized[slot]))
            elif slot == self._open_start:
                # open slot reported as its consolidation-so-far
                points.append((slot, self._consolidate()))
            else:
                points.append((slot, None))
            slot += step
        return SeriesSlice(step=step, points=points)

    def row_count(self) -> int:
        return len(self._rows)

    def rows(self) -> list[tuple[int, float | None]]:
        return list(self._rows)


class Series:
    def __init__(self, key: SeriesKey, specs=DEFAULT_ARCHIVES):
        self.key = key
        self.archives = [RoundRobinArchive(s) for s in sorted(specs, key=lambda s: s.step)]
        self.last_raw: tuple[float, float] | None = None

    def insert(self, timestamp: float, value: float) -> bool:
        accepted = False
        for archive in self.archives:
            accepted = archive.insert(timestamp, value) or accepted
        if self.last_raw is None or timestamp >= self.last_raw[0]:
            self.last_raw = (timestamp, value)
        return accepted

    def choose_step(self, start: float) -> int:
        for archive in self.archives:  # finest first
            if archive.covers(start):
                return archive.spec.step
        return self.archives[-1].spec.step

    def slice(self, start: float, end: float, step: int | None = None) -> SeriesSlice:
        if step is None:
            step = self.choose_step(start)
        for archive in self.archives:
            if archive.spec.step == step:
                return archive.slice(start, end)
        return self._downsample(start, end, step)

    def _downsample(self, start: float, end: float, step: int) -> SeriesSlice:
        # no archive at the requested step: consolidate the finest finer one
        sources = [a for a in self.archives if a.spec.step < step and step % a.spec.step == 0]
        if not sources:
            raise StoreError(f"no archive can serve step {step} for {self.key}")
        fine = sources[-1].slice(start, end)
        cf = sources[-1].spec.cf
        points: list[tuple[int, float | None]] = []
        first = int(start // step) * step
        slot = first
        by_slot: dict[int, list[float]] = {}
        for t, v in fine.points:
            if v is not None:
                by_slot.setdefault(int(t // step) * step, []).append(v)
        while slot < end:
            bucket = by_slot.get(slot)
            if not bucket:
                points.append((slot, None))
            elif cf is ConsolidationFn.MAX:
                points.append((slot, max(bucket)))
            elif cf is ConsolidationFn.LAST:
                points.append((slot, bucket[-1]))
            else:
                points.append((slot, sum(bucket) / len(bucket)))
            slot += step
        return SeriesSlice(step=step, points=points)


class SeriesStore:
    """All series, keyed by (hostname, metric); thread-safe."""

    def __init__(self, default_specs=DEFAULT_ARCHIVES):
        self._default_specs = tuple(default_specs)
        self._series: dict[SeriesKey, Series] = {}
        self._lock = threading.RLock()
        self.stale_dropped = 0
        self.nonfinite_rejected = 0

    def insert(self, key: SeriesKey, timestamp: float, value: float) -> None:
        value = float(value)
        if not math.isfinite(value):
            with self._lock:
                self.nonfinite_rejected += 1
            raise NonFiniteValue(f"{key}: {value!r}")
        with self._lock:
            series = self._series.get(key)
            if series is None:
                series = Series(key, self._default_specs)
                self._series[key] = series
            if not series.insert(timestamp, value):
                self.stale_dropped += 1
                raise StaleSample(f"{key}: sample at {timestamp} precedes finalized data")

    def query(self, key: SeriesKey, start: float, end: float, step: int | None = None) -> SeriesSlice:
        if start >= end:
            raise ValueError(f"start {start} must precede end {end}")
        with self._lock:
            series = self._series.get(key)
            if series is None:
                raise UnknownSeries(str(key))
            return series.slice(start, end, step)

    def choose_step(self, key: SeriesKey, start: float) -> int | None:
        with self._lock:
            series = self._series.get(key)
            return None if series is None else series.choose_step(start)

    def last(self, key: SeriesKey) -> tuple[float, float] | None:
        with self._lock:
            series = self._series.get(key)
            return None if series is None else series.last_raw

    def keys(self) -> list[SeriesKey]:
        with self._lock:
            return list(self._series)

    def has_series(self, key: SeriesKey) -> bool:
        with self._lock:
            return key in self._series

    # -- snapshot ---------------------------------------------------------
    #
    # Header C2MSRRD1, big-endian, for restart warm-up only.  Any other
    # header byte sequence (including a future C2MSRRD2) is rejected.

    SNAPSHOT_MAGIC = b"C2MSRRD1"

    def save_snapshot(self, path: str) -> None:
        with self._lock:
            blob = self._serialize()
        tmp = f"{path}.tmp.{os.getpid()}"
        with open(tmp, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)

    def _serialize(self) -> bytes:
        out = io.BytesIO()
        out.write(self.SNAPSHOT_MAGIC)
        out.write(struct.pack(">I", len(self._series)))
        for key, series in self._series.items():
            host_b = key.hostname.encode("utf-8")
            name_b = key.metric.encode("utf-8")
            out.write(struct.pack(">B", len(host_b)))
            out.write(host_b)
            out.write(struct.pack(">B", len(name_b)))
            out.write(name_b)
            if series.last_raw is None:
                out.write(b"\x00")
            else:
                out.write(struct.pack(">Bdd", 1, *series.last_raw))
            out.write(struct.pack(">B", len(series.archives)))
            for archive in series.archives:
                spec = archive.spec
                out.write(struct.pack(">IIB", spec.step, spec.rows, int(spec.cf)))
                if archive._open_start is None:
                    out.write(b"\x00")
                else:
                    out.write(
                        struct.pack(
                            ">Bqdiddd",
                            1,
                            archive._open_start,
                            archive._sum,
                            archive._count,
                            archive._max,
                            archive._last,
                            archive._last_ts,
                        )
                    )
                rows = archive.rows()
                out.write(struct.pack(">I", len(rows)))
                for slot, value in rows:
                    if value is None:
                        out.write(struct.pack(">qBd", slot, 0, 0.0))
                    else:
                        out.write(struct.pack(">qBd", slot, 1, value))
        return out.getvalue()

    @classmethod
    def load_snapshot(cls, path: str) -> "SeriesStore":
        with open(path, "rb") as fh:
            data = fh.read()
        if data[: len(cls.SNAPSHOT_MAGIC)] != cls.SNAPSHOT_MAGIC:
            raise SnapshotFormatError(f"unsupported snapshot header {data[:8]!r}")
        store = cls()
        r = io.BytesIO(data[len(cls.SNAPSHOT_MAGIC):])

        def unpack(fmt):
            size = struct.calcsize(fmt)
            chunk = r.read(size)
            if len(chunk) != size:
                raise SnapshotFormatError("truncated snapshot")
            return struct.unpack(fmt, chunk)

        (n_series,) = unpack(">I")
        for _ in range(n_series):
            (host_len,) = unpack(">B")
            hostname = r.read(host_len).decode("utf-8")
            (name_len,) = unpack(">B")
            metric = r.read(name_len).decode("utf-8")
            key = SeriesKey(hostname, metric)
            (has_last,) = unpack(">B")
            last_raw = None
            if has_last:
                last_raw = tuple(unpack(">dd"))
            (n_archives,) = unpack(">B")
            specs = []
            archives = []
            for _ in range(n_archives):
                step, rows, cf = unpack(">IIB")
                spec = ArchiveSpec(step, rows, ConsolidationFn(cf))
                specs.append(spec)
                archive = RoundRobinArchive(spec)
                (has_open,) = unpack(">B")
                if has_open:
                    (
                        archive._open_start,
                        archive._sum,
                        archive._count,
                        archive._max,
                        archive._last,
                        archive._last_ts,
                    ) = unpack(">qdiddd")
                (n_rows,) = unpack(">I")
                for _ in range(n_rows):
                    slot, known, value = unpack(">qBd")
                    archive._rows.append((slot, value if known else None))
                archives.append(archive)
            series = Series(key, specs)
            series.archives = archives
            series.last_raw = last_raw
            store._series[key] = series
        return store
