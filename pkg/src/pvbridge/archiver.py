"""Batch archiver: buffer every processed sample, flush to append-only segments.

Segment file layout (all integers big-endian)::

    "PVAR" | version u16 | frame count u32 | frames...
    frame: name_len u16 | name | epoch_seconds u32 | nanoseconds u32
           | dtype u8 | status u8 | severity u8 | pad u8 | value 8 bytes

The value is an f64 for TIME_DOUBLE and a zero-extended u64 for TIME_ENUM.
Segments are written to a temporary name and renamed into place, so a
segment is either complete or absent. One global buffer is flushed by a
single flusher thread on a fixed 10 s cadence.
"""
from __future__ import annotations

import fnmatch
import logging
import os
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .pvcore import Condition, QualifiedValue, Severity, Timestamp
from .wire import DType

logger = logging.getLogger(__name__)

MAGIC = b"PVAR"
VERSION = 1
FLUSH_PERIOD_S = 10.0
DEFAULT_CAPACITY = 1_000_000

_SEG_HEADER = struct.Struct(">4sHI")
_NAME_LEN = struct.Struct(">H")
_FRAME_TAIL = struct.Struct(">IIBBBx8s")
_F64 = struct.Struct(">d")
_U64 = struct.Struct(">Q")


class ArchiveError(Exception):
    pass


class BufferOverflow(ArchiveError):
    pass


class InsufficientData(ArchiveError):
    pass


class CorruptSegment(ArchiveError):
    pass


@dataclass(frozen=True)
class ArchiveSample:
    pv: str
    value: QualifiedValue
    dtype: DType = DType.TIME_DOUBLE

    @property
    def t(self) -> float:
        return self.value.timestamp.to_float()

    @property
    def sort_key(self):
        return (self.pv, self.value.timestamp)


# -- segment codec ----------------------------------------------------------

def encode_segment(samples) -> bytes:
    samples = sorted(samples, key=lambda s: s.sort_key)
    parts = [_SEG_HEADER.pack(MAGIC, VERSION, len(samples))]
    for s in samples:
        name = s.pv.encode("utf-8")
        qv = s.value
        if DType(s.dtype).is_enum:
            raw = _U64.pack(int(qv.value))
        else:
            raw = _F64.pack(float(qv.value))
        parts.append(_NAME_LEN.pack(len(name)))
        parts.append(name)
        parts.append(_FRAME_TAIL.pack(qv.timestamp.seconds, qv.timestamp.nanoseconds, int(s.dtype),
                                      int(qv.condition), int(qv.severity), raw))
    return b"".join(parts)


def decode_segment(data: bytes) -> list[ArchiveSample]:
    if len(data) < _SEG_HEADER.size:
        raise CorruptSegment("short header")
    magic, version, count = _SEG_HEADER.unpack_from(data, 0)
    if magic != MAGIC or version != VERSION:
        raise CorruptSegment(f"bad magic/version {magic!r}/{version}")
    pos = _SEG_HEADER.size
    out = []
    try:
        for _ in range(count):
            (n,) = _NAME_LEN.unpack_from(data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            secs, nanos, dtype, status, sev, raw = _FRAME_TAIL.unpack_from(data, pos)
            pos += _FRAME_TAIL.size
            dtype = DType(dtype)
            value = _U64.unpack(raw)[0] if dtype.is_enum else _F64.unpack(raw)[0]
            qv = QualifiedValue(value, Timestamp(secs, nanos), Severity(sev), Condition(status))
            out.append(ArchiveSample(name, qv, dtype))
    except (struct.error, ValueError) as exc:
        raise CorruptSegment(str(exc)) from exc
    if pos != len(data):
        raise CorruptSegment(f"{len(data) - pos} trailing bytes")
    return out


# -- store ------------------------------------------------------------------

@dataclass
class FlushReport:
    path: Path | None
    frames: int
    dropped_total: int
    wall_time: float


@dataclass
class _SegmentInfo:
    path: Path
    t_min: float
    t_max: float


@dataclass
class Accounting:
    appended: int
    durable: int
    buffered: int
    dropped: int

    @property
    def balanced(self) -> bool:
        return self.appended == self.durable + self.buffered + self.dropped


class Archiver:
    """Append-only segment store with a bounded in-memory buffer.

    ``append`` may be called from any thread. ``flush`` is called by exactly
    one flusher (the cadence thread started by :meth:`start`, or the caller
    in tests). Queries only see fully renamed segments.
    """

    def __init__(self, directory, capacity: int = DEFAULT_CAPACITY, flush_period: float = FLUSH_PERIOD_S,
                 raise_on_overflow: bool = False):
        self.raise_on_overflow = raise_on_overflow
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.capacity = capacity
        self.flush_period = flush_period
        self._lock = threading.Lock()
        self._flush_lock = threading.Lock()
        self._buffer: list[ArchiveSample] = []
        self._inflight = 0
        self.appended = 0
        self.durable = 0
        self.dropped = 0
        self.flush_times: list[float] = []
        self.flush_reports: list[FlushReport] = []
        self._index: dict[str, list[_SegmentInfo]] = {}
        self._seq = 0
        self._cache: dict[Path, dict[str, list[ArchiveSample]]] = {}
        self._thread: threading.Thread | None = None
        self._stop = threading.Event()
        self.fail_next_write = False
        self._rebuild_index()

    def _rebuild_index(self):
        for tmp in self.dir.glob("*.tmp"):
            logger.warning("removing incomplete segment %s", tmp.name)
            tmp.unlink()
        for path in sorted(self.dir.glob("seg-*.pvar")):
            self._seq = max(self._seq, int(path.stem.split("-")[1]) + 1)
            self._index_segment(path, decode_segment(path.read_bytes()))

    def _index_segment(self, path: Path, samples):
        per_pv: dict[str, list[float]] = {}
        for s in samples:
            per_pv.setdefault(s.pv, []).append(s.t)
        for pv, ts in per_pv.items():
            self._index.setdefault(pv, []).append(_SegmentInfo(path, min(ts), max(ts)))

    def segments(self) -> list[Path]:
        return sorted(self.dir.glob("seg-*.pvar"))

    # producers
    def buffer_append(self, sample: ArchiveSample) -> bool:
        """Enqueue a sample. On overflow the drop is counted and False is
        returned, or BufferOverflow raised if ``raise_on_overflow`` is set."""
        with self._lock:
            self.appended += 1
            if len(self._buffer) + self._inflight >= self.capacity:
                self.dropped += 1
                if self.raise_on_overflow:
                    raise BufferOverflow(f"buffer full at {self.capacity} samples")
                return False
            self._buffer.append(sample)
            return True

    append = buffer_append

    def accounting(self) -> Accounting:
        with self._lock:
            return Accounting(self.appended, self.durable, len(self._buffer) + self._inflight, self.dropped)

    # flusher
    def flush(self, now: float | None = None) -> FlushReport | None:
        with self._flush_lock:
            with self._lock:
                batch = self._buffer
                self._buffer = []
                self._inflight = len(batch)
            if not batch:
                with self._lock:
                    self._inflight = 0
                return None
            path = self.dir / f"seg-{self._seq:08d}.pvar"
            tmp = path.with_suffix(".tmp")
            try:
                if self.fail_next_write:
                    self.fail_next_write = False
                    raise OSError("injected write failure")
                data = encode_segment(batch)
                with open(tmp, "wb") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, path)
            except OSError as exc:
                logger.error("segment write failed, keeping %d samples: %s", len(batch), exc)
                tmp.unlink(missing_ok=True)
                with self._lock:
                    self._buffer[:0] = batch
                    self._inflight = 0
                return None
            self._seq += 1
            with self._lock:
                self._index_segment(path, batch)
                self.durable += len(batch)
                self._inflight = 0
            wall = time.monotonic() if now is None else now
            report = FlushReport(path, len(batch), self.dropped, wall)
            self.flush_reports.append(report)
            return report

    def start(self):
        """Run the flush cadence in a background thread (fixed phase)."""
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="archiver-flusher", daemon=True)
        self._thread.start()

    def _run(self):
        due = time.monotonic() + self.flush_period
        while not self._stop.wait(max(0.0, due - time.monotonic())):
            now = time.monotonic()
            self.flush_times.append(now)
            self.flush(now)
            due += self.flush_period

    def stop(self, final_flush: bool = True):
        self._stop.set()
        if self._thread:
            self._thread.join()
            self._thread = None
        if final_flush:
            self.flush()

    def flush_intervals(self) -> list[float]:
        return [b - a for a, b in zip(self.flush_times, self.flush_times[1:])]

    # readers
    def pvs(self) -> list[str]:
        with self._lock:
            return sorted(self._index)

    def _load(self, path: Path) -> dict[str, list[ArchiveSample]]:
        # segments are immutable once renamed, so decoded frames are cached
        cached = self._cache.get(path)
        if cached is None:
            cached = {}
            for sample in decode_segment(path.read_bytes()):
                cached.setdefault(sample.pv, []).append(sample)
            if len(self._cache) >= 512:
                self._cache.pop(next(iter(self._cache)))
            self._cache[path] = cached
        return cached

    def query(self, pv: str, t0: float, t1: float) -> list[ArchiveSample]:
        if t0 > t1:
            raise ValueError(f"query range reversed: {t0} > {t1}")
        with self._lock:
            infos = [i for i in self._index.get(pv, []) if i.t_max >= t0 and i.t_min <= t1]
        out = []
        for info in infos:
            out.extend(s for s in self._load(info.path).get(pv, ()) if t0 <= s.t <= t1)
        out.sort(key=lambda s: s.value.timestamp)
        return out

    def query_all(self, pv: str) -> list[ArchiveSample]:
        return self.query(pv, float("-inf"), float("inf"))

    def match(self, pattern: str) -> list[str]:
        return [p for p in self.pvs() if fnmatch.fnmatchcase(p, pattern)]


@dataclass(frozen=True)
class Gap:
    t_before: float
    t_after: float
    span_s: float


def gap_scan(timestamps, period_s: float, k: float = 2.0) -> list[Gap]:
    """Every consecutive pair of timestamps further apart than ``k * period_s``."""
    if not k > 1:
        raise ValueError("gap factor must exceed 1")
    ts = [s.t if isinstance(s, ArchiveSample) else float(s) for s in timestamps]
    if len(ts) < 2:
        raise InsufficientData("gap scan needs at least 2 samples")
    limit = k * period_s
    return [Gap(a, b, b - a) for a, b in zip(ts, ts[1:]) if b - a > limit]


def archive_gaps(archiver: Archiver, pv: str, period_s: float, k: float = 2.0) -> list[Gap]:
    return gap_scan(archiver.query_all(pv), period_s, k)


def sample_from_wire(pv: str, v) -> ArchiveSample:
    return ArchiveSample(pv, QualifiedValue.from_wire(v), v.dtype)

