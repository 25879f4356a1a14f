"""Asyncio PVWire server and client shared by the upstream server, the
gateway, the reference IOC, the archiver and the bench.

Everything runs on one event loop per process. Outgoing frames for a session
are appended to a per-session buffer and written in one transport call at
the end of the current loop iteration, which keeps per-subscription order
and makes fan-out to many subscribers cheap.
"""
from __future__ import annotations

import asyncio
import inspect
import itertools
import logging
import time
from dataclasses import dataclass, field
from typing import Awaitable, Callable

from . import wire
from .wire import Command, DType, Message, Status, WireValue, encode_message

logger = logging.getLogger(__name__)

ECHO_PERIOD_S = 15.0
SLOW_CONSUMER_BYTES = 64 * 1024 * 1024


def parse_addr(addr: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return host or default_host, int(port)


# -- server -----------------------------------------------------------------

@dataclass(eq=False)
class Channel:
    """A named value served over PVWire."""

    name: str
    dtype: DType
    get: Callable[[], WireValue]
    put: Callable[[WireValue], Status | Awaitable[Status]] | None = None
    readable: bool = True
    writable: bool = False
    sid: int = 0
    subscribers: list = field(default_factory=list)

    @property
    def access(self) -> int:
        return (wire.ACCESS_READ if self.readable else 0) | (wire.ACCESS_WRITE if self.writable else 0)


class PVServer:
    """PVWire server over a set of :class:`Channel` objects.

    ``allow_multi`` controls whether READ_MULTI is answered (it requires
    TIME dtypes). ``drop_event_at`` is a fault-injection hook: the N-th
    update EVENT sent by this server (1-based, across all sessions) is
    silently discarded.
    """

    def __init__(self, *, allow_multi: bool = True, echo_period: float = ECHO_PERIOD_S,
                 drop_event_at: int | None = None, label: str = "pvserver"):
        self.channels: dict[str, Channel] = {}
        self._by_sid: dict[int, Channel] = {}
        self.allow_multi = allow_multi
        self.echo_period = echo_period
        self.drop_event_at = drop_event_at
        self.label = label
        self.sessions: set[ServerSession] = set()
        self.events_sent = 0
        self.events_dropped = 0
        self._server: asyncio.base_events.Server | None = None

    def add_channel(self, ch: Channel) -> Channel:
        if ch.name in self.channels:
            raise ValueError(f"duplicate channel {ch.name}")
        ch.sid = len(self._by_sid) + 1
        self.channels[ch.name] = ch
        self._by_sid[ch.sid] = ch
        return ch

    def channel_by_sid(self, sid: int) -> Channel | None:
        return self._by_sid.get(sid)

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        loop = asyncio.get_running_loop()
        self._server = await loop.create_server(lambda: ServerSession(self), host, port)
        sock = self._server.sockets[0]
        return sock.getsockname()[:2]

    @property
    def address(self) -> tuple[str, int]:
        return self._server.sockets[0].getsockname()[:2]

    async def close(self):
        if self._server is not None:
            self._server.close()
            for s in list(self.sessions):
                s.abort()
            await self._server.wait_closed()
            self._server = None

    def post(self, ch: Channel, value: WireValue):
        """Fan a new value out to every subscription on ``ch``, in call order."""
        if not ch.subscribers:
            return
        body = wire.encode_value(value)
        for session, subid in ch.subscribers:
            self.events_sent += 1
            if self.drop_event_at is not None and self.events_sent == self.drop_event_at:
                self.events_dropped += 1
                logger.warning("%s: fault injection dropped EVENT #%d", self.label, self.events_sent)
                continue
            session.send(encode_message(Message(Command.EVENT, value.dtype, 1, ch.sid, subid, body)))


class ServerSession(asyncio.Protocol):
    def __init__(self, server: PVServer):
        self.server = server
        self.decoder = wire.FrameDecoder()
        self.transport: asyncio.Transport | None = None
        self.sids: set[int] = set()
        self.subs: dict[int, Channel] = {}
        self._out = bytearray()
        self._flush_scheduled = False
        self._last_rx = time.monotonic()
        self._watchdog: asyncio.TimerHandle | None = None
        self.closed = False

    # asyncio.Protocol
    def connection_made(self, transport):
        self.transport = transport
        self.server.sessions.add(self)
        self._arm_watchdog()

    def connection_lost(self, exc):
        self.closed = True
        self.server.sessions.discard(self)
        if self._watchdog:
            self._watchdog.cancel()
        for subid, ch in self.subs.items():
            try:
                ch.subscribers.remove((self, subid))
            except ValueError:
                pass
        self.subs.clear()

    def data_received(self, data):
        self._last_rx = time.monotonic()
        try:
            msgs = self.decoder.feed(data)
        except wire.WireError as exc:
            logger.warning("%s: protocol error from client: %s", self.server.label, exc)
            self.abort()
            return
        for msg in msgs:
            self.dispatch(msg)

    def _arm_watchdog(self):
        loop = asyncio.get_running_loop()
        limit = 3 * self.server.echo_period
        self._watchdog = loop.call_later(self.server.echo_period, self._check_idle, limit)

    def _check_idle(self, limit):
        if self.closed:
            return
        if time.monotonic() - self._last_rx > limit:
            logger.info("%s: closing idle session", self.server.label)
            self.abort()
            return
        self._arm_watchdog()

    def abort(self):
        if self.transport is not None and not self.closed:
            self.transport.abort()

    def send(self, frame: bytes):
        if self.closed:
            return
        self._out += frame
        if not self._flush_scheduled:
            self._flush_scheduled = True
            asyncio.get_running_loop().call_soon(self._flush)

    def _flush(self):
        self._flush_scheduled = False
        if self.closed or not self._out:
            self._out.clear()
            return
        self.transport.write(bytes(self._out))
        self._out.clear()
        if self.transport.get_write_buffer_size() > SLOW_CONSUMER_BYTES:
            logger.warning("%s: disconnecting slow consumer", self.server.label)
            self.abort()

    def reply(self, msg: Message):
        self.send(encode_message(msg))

    def error(self, request: Message, status: Status, ioid: int):
        self.reply(Message(Command.ERROR, request.command, 0, int(status), ioid))

    def _channel(self, sid: int) -> Channel | None:
        if sid not in self.sids:
            return None
        return self.server.channel_by_sid(sid)

    def dispatch(self, msg: Message):
        cmd = msg.command
        srv = self.server
        if cmd == Command.EVENT_ADD:
            ch = self._channel(msg.param1)
            if ch is None or not ch.readable:
                self.error(msg, Status.NOT_FOUND if ch is None else Status.ACCESS_DENIED, msg.param2)
                return
            self.subs[msg.param2] = ch
            ch.subscribers.append((self, msg.param2))
            value = ch.get()
            self.reply(Message(Command.EVENT, value.dtype, 1, ch.sid, msg.param2, wire.encode_value(value)))
        elif cmd == Command.READ:
            ch = self._channel(msg.param1)
            if ch is None or not ch.readable:
                self.error(msg, Status.NOT_FOUND if ch is None else Status.ACCESS_DENIED, msg.param2)
                return
            value = ch.get()
            self.reply(wire.value_message(Command.READ_RESP, value.dtype, value, ch.sid, msg.param2))
        elif cmd == Command.ECHO:
            self.reply(Message(Command.ECHO))
        elif cmd == Command.CREATE_CHAN:
            try:
                name = wire.decode_name(msg.payload)
            except UnicodeDecodeError:
                name = ""
            ch = srv.channels.get(name)
            if ch is None:
                self.reply(Message(Command.CREATE_FAIL, 0, 0, msg.param1, int(Status.NOT_FOUND)))
                return
            self.sids.add(ch.sid)
            self.reply(Message(Command.CREATE_OK, ch.dtype, 1, msg.param1, ch.sid,
                               ch.access.to_bytes(4, "big")))
        elif cmd == Command.WRITE:
            self._write(msg)
        elif cmd == Command.READ_MULTI:
            self._read_multi(msg)
        elif cmd == Command.EVENT_CANCEL:
            ch = self.subs.pop(msg.param2, None)
            if ch is not None:
                try:
                    ch.subscribers.remove((self, msg.param2))
                except ValueError:
                    pass
        elif cmd == Command.HELLO:
            self.reply(Message(Command.HELLO))
        else:
            self.error(msg, Status.BAD_REQUEST, msg.param2)

    def _read_multi(self, msg: Message):
        if not self.server.allow_multi:
            self.error(msg, Status.UNSUPPORTED, msg.param2)
            return
        try:
            sids = wire.decode_read_multi(msg.payload)
        except (wire.WireError, Exception):
            self.error(msg, Status.BAD_REQUEST, msg.param2)
            return
        entries = []
        for sid in sids:
            ch = self._channel(sid)
            if ch is None:
                entries.append((sid, int(Status.NOT_FOUND), None))
            elif not ch.readable:
                entries.append((sid, int(Status.ACCESS_DENIED), None))
            else:
                entries.append((sid, 0, ch.get()))
        payload = wire.encode_multi_entries(entries)
        if wire.padded_len(len(payload)) > wire.MAX_PAYLOAD:
            self.error(msg, Status.BAD_REQUEST, msg.param2)
            return
        self.reply(Message(Command.READ_MULTI_RESP, 0, len(entries), 0, msg.param2, payload))

    def _write(self, msg: Message):
        ioid = msg.param2
        ch = self._channel(msg.param1)
        if ch is None:
            status = Status.NOT_FOUND
        elif not ch.writable or ch.put is None:
            status = Status.ACCESS_DENIED
        else:
            try:
                value = wire.decode_value(msg.data_type, msg.payload)
            except (ValueError, Exception):
                value = None
            if value is None or value.dtype.is_enum != ch.dtype.is_enum:
                status = Status.TYPE_MISMATCH
            else:
                result = ch.put(value)
                if inspect.isawaitable(result):
                    asyncio.ensure_future(self._finish_write(result, ioid))
                    return
                status = result
        self.reply(Message(Command.WRITE_ACK, 0, 0, int(status), ioid))

    async def _finish_write(self, pending, ioid):
        try:
            status = await pending
        except Exception:
            logger.exception("%s: write failed", self.server.label)
            status = Status.BAD_REQUEST
        self.reply(Message(Command.WRITE_ACK, 0, 0, int(status), ioid))


# -- client -----------------------------------------------------------------

class ClientError(Exception):
    pass


class Disconnected(ClientError):
    pass


class RequestFailed(ClientError):
    def __init__(self, status, what=""):
        self.status = Status(status) if status in Status._value2member_map_ else status
        super().__init__(f"{what}: {getattr(self.status, 'name', self.status)}")


@dataclass(frozen=True)
class ChannelInfo:
    name: str
    sid: int
    dtype: DType
    access: int

    @property
    def readable(self) -> bool:
        return bool(self.access & wire.ACCESS_READ)

    @property
    def writable(self) -> bool:
        return bool(self.access & wire.ACCESS_WRITE)


class PVClient(asyncio.Protocol):
    """Pipelined PVWire client.

    Sends ECHO every ``echo_period`` seconds and declares the link dead once
    nothing at all has been received for two echo periods.
    """

    def __init__(self, echo_period: float = ECHO_PERIOD_S, label: str = "client"):
        self.echo_period = echo_period
        self.label = label
        self.decoder = wire.FrameDecoder()
        self.transport: asyncio.Transport | None = None
        self._ids = itertools.count(1)
        self._pending: dict[int, tuple[asyncio.Future, object]] = {}
        self._pending_create: dict[int, tuple[asyncio.Future, str]] = {}
        self._subs: dict[int, Callable[[WireValue], None]] = {}
        self._dtypes: dict[int, DType] = {}
        self._out = bytearray()
        self._flush_scheduled = False
        self._keepalive: asyncio.Task | None = None
        self._last_rx = 0.0
        self.connected = False
        self.disconnect_reason: str | None = None
        self.on_disconnect: list[Callable[[str], None]] = []

    @classmethod
    async def connect(cls, host: str, port: int, *, timeout: float = 10.0, **kw) -> PVClient:
        loop = asyncio.get_running_loop()
        try:
            _, client = await asyncio.wait_for(
                loop.create_connection(lambda: cls(**kw), host, port), timeout)
        except (OSError, asyncio.TimeoutError) as exc:
            raise Disconnected(f"cannot connect to {host}:{port}: {exc}") from exc
        return client

    # asyncio.Protocol
    @property
    def last_rx(self) -> float:
        """Monotonic time the most recent chunk was read off the socket."""
        return self._last_rx

    def connection_made(self, transport):
        self.transport = transport
        self.connected = True
        self._last_rx = time.monotonic()
        self._keepalive = asyncio.ensure_future(self._keepalive_loop())

    def connection_lost(self, exc):
        self._mark_dead(f"connection lost: {exc}" if exc else "connection closed")

    def data_received(self, data):
        self._last_rx = time.monotonic()
        try:
            msgs = self.decoder.feed(data)
        except wire.WireError as exc:
            self._mark_dead(f"protocol error: {exc}")
            self.transport.abort()
            return
        for msg in msgs:
            self._dispatch(msg)

    def _mark_dead(self, reason: str):
        if not self.connected:
            return
        self.connected = False
        self.disconnect_reason = reason
        if self._keepalive is not None:
            self._keepalive.cancel()
        err = Disconnected(reason)
        for fut, _ in list(self._pending.values()) + list(self._pending_create.values()):
            if not fut.done():
                fut.set_exception(err)
        self._pending.clear()
        self._pending_create.clear()
        for cb in list(self.on_disconnect):
            try:
                cb(reason)
            except Exception:
                logger.exception("%s: disconnect callback failed", self.label)

    async def _keepalive_loop(self):
        step = self.echo_period / 20
        next_echo = time.monotonic()
        while self.connected:
            now = time.monotonic()
            if now - self._last_rx > 2 * self.echo_period:
                logger.warning("%s: no reply to 2 echoes, link dead", self.label)
                self._mark_dead("keepalive timeout")
                self.transport.abort()
                return
            if now >= next_echo:
                self._send(Message(Command.ECHO))
                next_echo += self.echo_period
            await asyncio.sleep(step)

    def _send(self, msg: Message):
        if not self.connected:
            raise Disconnected(self.disconnect_reason or "not connected")
        self._out += encode_message(msg)
        if not self._flush_scheduled:
            self._flush_scheduled = True
            asyncio.get_running_loop().call_soon(self._flush)

    def _flush(self):
        self._flush_scheduled = False
        if self.connected and self._out:
            self.transport.write(bytes(self._out))
        self._out.clear()

    def _dispatch(self, msg: Message):
        cmd = msg.command
        if cmd == Command.EVENT:
            cb = self._subs.get(msg.param2)
            if cb is not None:
                cb(wire.decode_value(msg.data_type, msg.payload))
        elif cmd == Command.READ_RESP:
            self._resolve(msg.param2, wire.decode_value(msg.data_type, msg.payload))
        elif cmd == Command.WRITE_ACK:
            self._resolve(msg.param2, Status(msg.param1) if msg.param1 in Status._value2member_map_ else msg.param1)
        elif cmd == Command.READ_MULTI_RESP:
            entry = self._pending.get(msg.param2)
            dtypes = entry[1] if entry else {}
            self._resolve(msg.param2, wire.decode_multi_entries(msg.payload, msg.data_count, dtypes))
        elif cmd in (Command.CREATE_OK, Command.CREATE_FAIL):
            fut, name = self._pending_create.pop(msg.param1, (None, None))
            if fut is None or fut.done():
                return
            if cmd == Command.CREATE_OK:
                access = int.from_bytes(msg.payload[:4], "big") if msg.payload else wire.ACCESS_READ
                dtype = DType(msg.data_type)
                self._dtypes[msg.param2] = dtype
                fut.set_result(ChannelInfo(name, msg.param2, dtype, access))
            else:
                fut.set_exception(RequestFailed(msg.param2, f"create {name}"))
        elif cmd == Command.ERROR:
            fut, _ = self._pending.pop(msg.param2, (None, None))
            if fut is not None and not fut.done():
                fut.set_exception(RequestFailed(msg.param1, Command(msg.data_type).name
                                                if msg.data_type <= Command.ECHO else "request"))
            elif msg.param2 in self._subs:
                logger.warning("%s: subscription %d rejected: status %d", self.label, msg.param2, msg.param1)
        # ECHO / HELLO only refresh _last_rx

    def _resolve(self, ioid, result):
        fut, _ = self._pending.pop(ioid, (None, None))
        if fut is not None and not fut.done():
            fut.set_result(result)

    def _request(self, msg: Message, ioid: int, ctx=None) -> asyncio.Future:
        fut = asyncio.get_running_loop().create_future()
        self._pending[ioid] = (fut, ctx)
        self._send(msg)
        return fut

    def create_channel_nowait(self, name: str) -> asyncio.Future:
        cid = next(self._ids)
        fut = asyncio.get_running_loop().create_future()
        self._pending_create[cid] = (fut, name)
        self._send(Message(Command.CREATE_CHAN, 0, 0, cid, 0, wire.encode_name(name)))
        return fut

    async def create_channel(self, name: str, timeout: float = 10.0) -> ChannelInfo:
        return await asyncio.wait_for(self.create_channel_nowait(name), timeout)

    async def create_channels(self, names, timeout: float = 60.0) -> dict[str, ChannelInfo | None]:
        """Create many channels in one pipelined burst. Missing names map to None."""
        names = list(names)
        futs = [self.create_channel_nowait(n) for n in names]
        results = await asyncio.wait_for(asyncio.gather(*futs, return_exceptions=True), timeout)
        out = {}
        for name, res in zip(names, results):
            if isinstance(res, Disconnected):
                raise res
            out[name] = None if isinstance(res, BaseException) else res
        return out

    async def read(self, ch: ChannelInfo, timeout: float = 10.0) -> WireValue:
        ioid = next(self._ids)
        fut = self._request(Message(Command.READ, ch.dtype, 1, ch.sid, ioid), ioid)
        return await asyncio.wait_for(fut, timeout)

    async def read_multi(self, chans, timeout: float = 10.0):
        """One READ_MULTI round trip; returns ``[(sid, status, WireValue|None)]``."""
        chans = list(chans)
        ioid = next(self._ids)
        sids = [c.sid if isinstance(c, ChannelInfo) else int(c) for c in chans]
        msg = Message(Command.READ_MULTI, 0, len(sids), 0, ioid, wire.encode_read_multi(sids))
        fut = self._request(msg, ioid, dict(self._dtypes))
        return await asyncio.wait_for(fut, timeout)

    async def write(self, ch: ChannelInfo, value: float | int, timeout: float = 10.0) -> Status:
        ioid = next(self._ids)
        dtype = ch.dtype.as_plain()
        msg = wire.value_message(Command.WRITE, dtype, WireValue(dtype, value), ch.sid, ioid)
        return await asyncio.wait_for(self._request(msg, ioid), timeout)

    def subscribe(self, ch: ChannelInfo, callback: Callable[[WireValue], None]) -> int:
        subid = next(self._ids)
        self._subs[subid] = callback
        self._send(Message(Command.EVENT_ADD, ch.dtype, 1, ch.sid, subid))
        return subid

    def unsubscribe(self, ch: ChannelInfo, subid: int):
        self._subs.pop(subid, None)
        if self.connected:
            self._send(Message(Command.EVENT_CANCEL, ch.dtype, 1, ch.sid, subid))

    async def echo(self, timeout: float = 5.0):
        """Round-trip an ECHO; returns when any reply traffic arrives after it."""
        sent = time.monotonic()
        self._send(Message(Command.ECHO))
        deadline = sent + timeout
        while self._last_rx < sent:
            if time.monotonic() > deadline or not self.connected:
                raise Disconnected("echo timeout")
            await asyncio.sleep(0.001)

    def close(self):
        if self.transport is not None:
            self._flush()
            self.transport.close()
        self._mark_dead("closed by client")
