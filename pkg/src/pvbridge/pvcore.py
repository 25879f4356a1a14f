"""Record model, type mapping, alarm evaluation and the fixed-phase scan engine."""
from __future__ import annotations

import heapq
import itertools
import math
import threading
import time
from dataclasses import dataclass, field
from enum import Enum, IntEnum
from typing import NamedTuple

from .wire import DType, WireValue

MAX_NAME_BYTES = 60


class PVError(Exception):
    pass


class UnsupportedType(PVError):
    pass


class TypeMismatch(PVError):
    pass


class InvalidRecord(PVError):
    pass


class RecordType(str, Enum):
    AI = "ai"
    AO = "ao"
    BI = "bi"
    BO = "bo"

    @property
    def is_analog(self) -> bool:
        return self in (RecordType.AI, RecordType.AO)

    @property
    def is_output(self) -> bool:
        return self in (RecordType.AO, RecordType.BO)

    @property
    def dtype(self) -> DType:
        return DType.TIME_DOUBLE if self.is_analog else DType.TIME_ENUM


class Severity(IntEnum):
    NONE = 0
    MINOR = 1
    MAJOR = 2
    INVALID = 3


class Condition(IntEnum):
    NO_ALARM = 0
    HIGH = 1
    HIHI = 2
    LOW = 3
    LOLO = 4
    COMM = 5


NO_ALARM = (Severity.NONE, Condition.NO_ALARM)
COMM_ALARM = (Severity.INVALID, Condition.COMM)


_TYPE_MAP = {
    ("Double", "input"): (RecordType.AI, DType.TIME_DOUBLE),
    ("Double", "output"): (RecordType.AO, DType.TIME_DOUBLE),
    ("Boolean", "input"): (RecordType.BI, DType.TIME_ENUM),
    ("Boolean", "output"): (RecordType.BO, DType.TIME_ENUM),
}


def map_pv_type(published_type: str, direction: str) -> tuple[RecordType, DType]:
    """Map a published variable type and direction to a record type and wire dtype."""
    try:
        return _TYPE_MAP[(published_type, direction)]
    except KeyError:
        raise UnsupportedType(f"no record mapping for {published_type}/{direction}") from None


# -- scan specs -------------------------------------------------------------

@dataclass(frozen=True)
class Periodic:
    period_s: float

    def __post_init__(self):
        if not (self.period_s > 0 and math.isfinite(self.period_s)):
            raise ValueError(f"scan period must be positive, got {self.period_s}")

    def __str__(self):
        return f"periodic:{self.period_s:g}"

    @property
    def scan_field(self) -> str:
        return f"{self.period_s:g} second"


@dataclass(frozen=True)
class Event:
    def __str__(self):
        return "event"

    @property
    def scan_field(self) -> str:
        return "Event"


ScanSpec = Periodic | Event


def parse_scan(text: str) -> ScanSpec:
    """Parse ``periodic:<s>``, ``event``, or a database SCAN field such as
    ``"1 second"`` / ``"Event"``."""
    t = text.strip()
    low = t.lower()
    if low in ("event", "i/o intr"):
        return Event()
    if low.startswith("periodic:"):
        return Periodic(float(t.split(":", 1)[1]))
    if low.endswith("second"):
        return Periodic(float(low[: -len("second")].strip()))
    raise ValueError(f"unrecognised scan spec {text!r}")


# -- alarms -----------------------------------------------------------------

@dataclass(frozen=True)
class AlarmLimits:
    """Analog alarm limits; ``None`` means the limit is disabled."""

    lolo: float | None = None
    low: float | None = None
    high: float | None = None
    hihi: float | None = None

    def __post_init__(self):
        enabled = [v for v in (self.lolo, self.low, self.high, self.hihi) if v is not None]
        if any(math.isnan(v) for v in enabled):
            raise InvalidRecord("alarm limits must not be NaN")
        if any(a > b for a, b in zip(enabled, enabled[1:])):
            raise InvalidRecord(f"alarm limits out of order: {self}")

    @classmethod
    def from_mask(cls, values, mask: int) -> AlarmLimits:
        """Build from ``(lolo, low, high, hihi)`` keeping only the limits
        whose bit (lolo=1, low=2, high=4, hihi=8) is set in ``mask``."""
        return cls(*(v if mask & (1 << i) else None for i, v in enumerate(values)))

    @property
    def any_enabled(self) -> bool:
        return any(v is not None for v in (self.lolo, self.low, self.high, self.hihi))


def evaluate_alarm(value: float, limits: AlarmLimits) -> tuple[Severity, Condition]:
    if math.isnan(value):
        return COMM_ALARM
    if limits.hihi is not None and value >= limits.hihi:
        return Severity.MAJOR, Condition.HIHI
    if limits.lolo is not None and value <= limits.lolo:
        return Severity.MAJOR, Condition.LOLO
    if limits.high is not None and value >= limits.high:
        return Severity.MINOR, Condition.HIGH
    if limits.low is not None and value <= limits.low:
        return Severity.MINOR, Condition.LOW
    return NO_ALARM


# -- values -----------------------------------------------------------------

class Timestamp(NamedTuple):
    seconds: int
    nanoseconds: int

    @classmethod
    def from_float(cls, t: float) -> Timestamp:
        ns = round(t * 1e9)
        return cls(ns // 1_000_000_000, ns % 1_000_000_000)

    @classmethod
    def from_ns(cls, ns: int) -> Timestamp:
        return cls(ns // 1_000_000_000, ns % 1_000_000_000)

    def to_float(self) -> float:
        return self.seconds + self.nanoseconds * 1e-9


@dataclass(frozen=True)
class QualifiedValue:
    value: float | int
    timestamp: Timestamp
    severity: Severity = Severity.NONE
    condition: Condition = Condition.NO_ALARM

    def __post_init__(self):
        if (self.severity == Severity.NONE) != (self.condition == Condition.NO_ALARM):
            raise ValueError(f"inconsistent alarm {self.severity.name}/{self.condition.name}")
        if self.condition == Condition.COMM and self.severity != Severity.INVALID:
            raise ValueError("COMM alarms are always INVALID")

    def to_wire(self, dtype: DType) -> WireValue:
        return WireValue(dtype, self.value, int(self.condition), int(self.severity),
                         self.timestamp.seconds, self.timestamp.nanoseconds)

    @classmethod
    def from_wire(cls, v: WireValue) -> QualifiedValue:
        return cls(v.value, Timestamp(v.seconds, v.nanoseconds), Severity(v.severity), Condition(v.status))


class MonotonicClock:
    """Wall-clock epoch time that never goes backwards."""

    def __init__(self):
        self._last = 0
        self._lock = threading.Lock()

    def __call__(self) -> float:
        return self.now_ns() * 1e-9

    def now_ns(self) -> int:
        with self._lock:
            self._last = max(self._last, time.time_ns())
            return self._last


wallclock = MonotonicClock()


# -- records ----------------------------------------------------------------

def validate_name(name: str) -> str:
    if not name or len(name.encode("utf-8")) > MAX_NAME_BYTES or any(c.isspace() for c in name):
        raise InvalidRecord(f"invalid PV name {name!r}")
    return name


@dataclass
class Record:
    name: str
    rtype: RecordType
    scan: ScanSpec = field(default_factory=lambda: Periodic(1.0))
    limits: AlarmLimits = field(default_factory=AlarmLimits)
    readable: bool = True
    writable: bool | None = None
    value: QualifiedValue | None = None
    process_count: int = 0

    def __post_init__(self):
        validate_name(self.name)
        self.rtype = RecordType(self.rtype)
        if self.writable is None:
            self.writable = self.rtype.is_output
        if not self.rtype.is_analog and self.limits.any_enabled:
            raise InvalidRecord(f"{self.name}: binary records take no alarm limits")
        if self.value is None:
            # never processed: undefined value reported as a comm alarm
            self.value = QualifiedValue(0.0 if self.rtype.is_analog else 0, Timestamp(0, 0), *COMM_ALARM)

    @property
    def dtype(self) -> DType:
        return self.rtype.dtype

    def wire_value(self) -> WireValue:
        return self.value.to_wire(self.dtype)


def coerce_raw(rtype: RecordType, raw) -> float | int:
    if rtype.is_analog:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise TypeMismatch(f"{rtype.value} expects a number, got {raw!r}")
        return float(raw)
    if isinstance(raw, float):
        if not raw.is_integer():
            raise TypeMismatch(f"{rtype.value} expects 0 or 1, got {raw!r}")
        raw = int(raw)
    if not isinstance(raw, int) or raw not in (0, 1):
        raise TypeMismatch(f"{rtype.value} expects 0 or 1, got {raw!r}")
    return int(raw)


def process_record(record: Record, raw, now: float) -> QualifiedValue:
    value = coerce_raw(record.rtype, raw)
    ts = Timestamp.from_float(now)
    if record.rtype.is_analog:
        sev, cond = evaluate_alarm(value, record.limits)
        if cond == Condition.COMM:
            value = record.value.value
    else:
        sev, cond = NO_ALARM
    qv = QualifiedValue(value, ts, sev, cond)
    record.value = qv
    record.process_count += 1
    return qv


def mark_disconnected(record: Record, now: float) -> QualifiedValue:
    """Keep the last value but flag it INVALID/COMM. Not a processing."""
    record.value = QualifiedValue(record.value.value, Timestamp.from_float(now), *COMM_ALARM)
    return record.value


# -- scan engine ------------------------------------------------------------

class ScanEngine:
    """Fixed-phase periodic scheduler.

    Due times are kept as offsets from ``t0`` and advanced by exactly one
    period from the previous due time, so late ticks never accumulate drift
    and the sequence of due times is identical across processes that share
    the same record set.
    """

    def __init__(self, items=(), t0: float = 0.0):
        self.t0 = t0
        self._heap: list = []
        self._seq = itertools.count()
        for item in items:
            self.add(item)

    def add(self, item, first_due: float = 0.0):
        """Schedule ``item`` (anything with ``.scan``) with its first due
        offset. Event-scanned items are ignored."""
        if isinstance(item.scan, Periodic):
            heapq.heappush(self._heap, (first_due, next(self._seq), item))

    def __len__(self):
        return len(self._heap)

    def next_due(self) -> float | None:
        return self.t0 + self._heap[0][0] if self._heap else None

    def due(self, now: float) -> list[tuple[object, float]]:
        """Pop every occurrence due by ``now``; returns ``(item, due_offset)``
        pairs in due order, each rescheduled one period after its due time."""
        out = []
        heap = self._heap
        limit = now - self.t0
        while heap and heap[0][0] <= limit:
            off, _, item = heapq.heappop(heap)
            out.append((item, off))
            # a late caller gets every missed occurrence, still in time order
            heapq.heappush(heap, (off + item.scan.period_s, next(self._seq), item))
        return out


def scan_tick(engine: ScanEngine, now: float) -> list:
    """Return the periodic items due at ``now`` and advance their schedules."""
    return [item for item, _ in engine.due(now)]
