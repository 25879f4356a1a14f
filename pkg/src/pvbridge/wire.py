"""PVWire: the framed binary protocol spoken by every server and client here.

Every frame is a 16-byte big-endian header followed by a payload that is
zero-padded to a multiple of 8 bytes::

    command u16 | payload_len u16 | data_type u16 | data_count u16 | param1 u32 | param2 u32

``payload_len`` is the padded payload size. Field usage per command:

=================  ==========================  ===========================
command            param1                      param2
=================  ==========================  ===========================
HELLO / ECHO       0                           0
CREATE_CHAN        client channel id (cid)     0; payload = UTF-8 name
CREATE_OK          cid                         server id (sid); payload = access bits u32
CREATE_FAIL        cid                         status (nonzero)
READ               sid                         ioid
READ_RESP          sid                         ioid; payload = value
WRITE              sid                         ioid; payload = value
WRITE_ACK          status                      ioid
EVENT_ADD          sid                         subscription id
EVENT              sid                         subscription id; payload = value
EVENT_CANCEL       sid                         subscription id
READ_MULTI         0                           ioid; payload = u16 count, count x sid u32
READ_MULTI_RESP    0                           ioid; data_count = entries
ERROR              status                      ioid (data_type = failed command)
=================  ==========================  ===========================
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import IntEnum

HEADER = struct.Struct(">HHHHII")
HEADER_SIZE = HEADER.size
MAX_PAYLOAD = 65528

_TIME_META = struct.Struct(">HHII")
_F64 = struct.Struct(">d")
_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_MULTI_ENTRY = struct.Struct(">IH")

TIME_VALUE_SIZE = _TIME_META.size + 8

ACCESS_READ = 1
ACCESS_WRITE = 2


class Command(IntEnum):
    HELLO = 0
    CREATE_CHAN = 1
    CREATE_OK = 2
    CREATE_FAIL = 3
    READ = 4
    READ_RESP = 5
    WRITE = 6
    WRITE_ACK = 7
    EVENT_ADD = 8
    EVENT = 9
    EVENT_CANCEL = 10
    READ_MULTI = 11
    READ_MULTI_RESP = 12
    ERROR = 13
    ECHO = 14


class DType(IntEnum):
    PLAIN_DOUBLE = 0
    PLAIN_ENUM = 1
    TIME_DOUBLE = 2
    TIME_ENUM = 3

    @property
    def is_time(self) -> bool:
        return self in (DType.TIME_DOUBLE, DType.TIME_ENUM)

    @property
    def is_enum(self) -> bool:
        return self in (DType.PLAIN_ENUM, DType.TIME_ENUM)

    def as_time(self) -> DType:
        return DType.TIME_ENUM if self.is_enum else DType.TIME_DOUBLE

    def as_plain(self) -> DType:
        return DType.PLAIN_ENUM if self.is_enum else DType.PLAIN_DOUBLE


class Status(IntEnum):
    """Per-request status codes carried in CREATE_FAIL, WRITE_ACK, ERROR
    and READ_MULTI_RESP entries."""

    OK = 0
    NOT_FOUND = 1
    ACCESS_DENIED = 2
    TYPE_MISMATCH = 3
    DISCONNECTED = 4
    BAD_REQUEST = 5
    UNSUPPORTED = 6


class WireError(Exception):
    pass


class InvalidCommand(WireError):
    pass


class OversizePayload(WireError):
    pass


class MalformedHeader(WireError):
    pass


class BadPadding(WireError):
    pass


def padded_len(n: int) -> int:
    return (n + 7) & ~7


def pad(payload: bytes) -> bytes:
    extra = padded_len(len(payload)) - len(payload)
    return payload + b"\x00" * extra if extra else payload


@dataclass(frozen=True)
class Message:
    """One PVWire frame. The payload is stored padded, so equal messages
    encode to equal bytes and ``decode(encode(m)) == m``."""

    command: int
    data_type: int = 0
    data_count: int = 0
    param1: int = 0
    param2: int = 0
    payload: bytes = field(default=b"", repr=False)

    def __post_init__(self):
        if len(self.payload) % 8:
            object.__setattr__(self, "payload", pad(bytes(self.payload)))

    @property
    def payload_len(self) -> int:
        return len(self.payload)


def encode_message(msg: Message) -> bytes:
    try:
        Command(msg.command)
    except ValueError:
        raise InvalidCommand(f"unknown command code {msg.command}") from None
    if len(msg.payload) > MAX_PAYLOAD:
        raise OversizePayload(f"payload of {len(msg.payload)} bytes exceeds {MAX_PAYLOAD}")
    return HEADER.pack(msg.command, len(msg.payload), msg.data_type,
                       msg.data_count, msg.param1, msg.param2) + msg.payload


def decode_message(data: bytes | bytearray | memoryview, offset: int = 0):
    """Decode one frame starting at ``offset``.

    Returns ``(message, remaining)`` or ``(None, data[offset:])`` when the
    buffer does not yet hold a complete frame.
    """
    msg, end = decode_at(data, offset)
    if msg is None:
        return None, bytes(data[offset:])
    return msg, bytes(data[end:])


def decode_at(data, offset: int = 0):
    """Like :func:`decode_message` but returns ``(message, end_offset)``
    without copying the remainder; ``(None, offset)`` means need more bytes."""
    if len(data) - offset < HEADER_SIZE:
        return None, offset
    command, plen, dtype, count, p1, p2 = HEADER.unpack_from(data, offset)
    if command > Command.ECHO:
        raise MalformedHeader(f"unknown command code {command}")
    if plen % 8:
        raise BadPadding(f"payload_len {plen} is not a multiple of 8")
    end = offset + HEADER_SIZE + plen
    if len(data) < end:
        return None, offset
    return Message(command, dtype, count, p1, p2, bytes(data[offset + HEADER_SIZE:end])), end


class FrameDecoder:
    """Incremental decoder for a byte stream split at arbitrary boundaries."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list[Message]:
        self._buf += chunk
        out = []
        pos = 0
        while True:
            msg, pos2 = decode_at(self._buf, pos)
            if msg is None:
                break
            out.append(msg)
            pos = pos2
        if pos:
            del self._buf[:pos]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- value payloads ---------------------------------------------------------

@dataclass(frozen=True)
class WireValue:
    """A value as carried on the wire.

    PLAIN dtypes carry only ``value``; TIME dtypes also carry alarm status,
    severity and an epoch timestamp.
    """

    dtype: DType
    value: float | int
    status: int = 0
    severity: int = 0
    seconds: int = 0
    nanoseconds: int = 0

    def __post_init__(self):
        if not 0 <= self.nanoseconds < 1_000_000_000:
            raise ValueError("nanoseconds out of range")
        if not self.dtype.is_time and (self.status or self.severity or self.seconds or self.nanoseconds):
            raise ValueError("PLAIN values carry no alarm or time metadata")

    @property
    def timestamp(self) -> float:
        return self.seconds + self.nanoseconds * 1e-9


def encode_value(v: WireValue) -> bytes:
    if v.dtype.is_enum:
        body = _U16.pack(int(v.value)) + b"\x00" * 6
    else:
        body = _F64.pack(float(v.value))
    if v.dtype.is_time:
        return _TIME_META.pack(v.status, v.severity, v.seconds, v.nanoseconds) + body
    return body


def decode_value(dtype: int, payload: bytes, offset: int = 0) -> WireValue:
    dtype = DType(dtype)
    if dtype.is_time:
        status, severity, secs, nanos = _TIME_META.unpack_from(payload, offset)
        offset += _TIME_META.size
    else:
        status = severity = secs = nanos = 0
    if dtype.is_enum:
        value = _U16.unpack_from(payload, offset)[0]
    else:
        value = _F64.unpack_from(payload, offset)[0]
    return WireValue(dtype, value, status, severity, secs, nanos)


def value_size(dtype: DType) -> int:
    return TIME_VALUE_SIZE if DType(dtype).is_time else 8


def encode_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if not raw or b"\x00" in raw:
        raise ValueError(f"invalid PV name {name!r}")
    return raw


def decode_name(payload: bytes) -> str:
    return payload.rstrip(b"\x00").decode("utf-8")


def encode_read_multi(sids) -> bytes:
    sids = list(sids)
    return _U16.pack(len(sids)) + b"".join(_U32.pack(s) for s in sids)


def decode_read_multi(payload: bytes) -> list[int]:
    (count,) = _U16.unpack_from(payload, 0)
    if 2 + 4 * count > len(payload):
        raise WireError("READ_MULTI count exceeds payload")
    return [s for (s,) in struct.iter_unpack(">I", payload[2:2 + 4 * count])]


def encode_multi_entries(entries) -> bytes:
    """``entries`` is an iterable of ``(sid, status, WireValue | None)``.
    Values must be TIME dtypes; entries with nonzero status carry none."""
    parts = []
    for sid, status, value in entries:
        parts.append(_MULTI_ENTRY.pack(sid, status))
        if status == 0:
            if not value.dtype.is_time:
                raise ValueError("READ_MULTI_RESP values must be TIME dtypes")
            parts.append(encode_value(value))
    return b"".join(parts)


def decode_multi_entries(payload: bytes, count: int, dtypes: dict[int, DType]):
    """Inverse of :func:`encode_multi_entries`. The response carries no
    per-entry dtype, so the caller supplies each sid's channel dtype."""
    out = []
    pos = 0
    for _ in range(count):
        sid, status = _MULTI_ENTRY.unpack_from(payload, pos)
        pos += _MULTI_ENTRY.size
        value = None
        if status == 0:
            dtype = DType(dtypes.get(sid, DType.TIME_DOUBLE)).as_time()
            value = decode_value(dtype, payload, pos)
            pos += TIME_VALUE_SIZE
        out.append((sid, status, value))
    return out


def value_message(command: Command, dtype: DType, value: WireValue, param1: int, param2: int) -> Message:
    return Message(command, dtype, 1, param1, param2, encode_value(value))

