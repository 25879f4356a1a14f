"""Enrichment gateway: mirrors a limited upstream server as a full IOC.

The gateway connects to the upstream server as a client, subscribes to every
PV in its database, attaches a timestamp and evaluated alarm to every
update, and republishes the result as TIME_* values under a prefixed name.

Database files (``.pvdb``) are line oriented and whitespace insensitive::

    # comment
    record(ai, "NIOC:Temp1") {
        field(SCAN, "1 second")
        field(INP, "Temp1")
        field(HIHI, "9.0")
        field(WRITABLE, "false")
        field(SRC, "sine:1.0,0.2,0.0,5.0")
    }

Input records link with ``INP``, output records with ``OUT``. ``HIHI``,
``HIGH``, ``LOW`` and ``LOLO`` are optional. ``SRC`` is only used by the
reference IOC, which binds records directly to signal sources.
"""
from __future__ import annotations

import asyncio
import logging
import re
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

from . import netio
from .netio import ChannelInfo, PVClient
from .pvcore import (AlarmLimits, QualifiedValue, Record, RecordType, ScanSpec, TypeMismatch,
                     mark_disconnected, parse_scan, process_record, validate_name, wallclock)
from .upstream import DEFAULT_PREFIX, BindFailure, DuplicateName, SharedVariable, format_source, parse_source
from .wire import Status, WireValue

logger = logging.getLogger(__name__)


class GatewayError(Exception):
    pass


class DatabaseError(GatewayError):
    pass


class UpstreamUnreachable(GatewayError):
    pass


class UpstreamContractError(AssertionError):
    """The upstream server sent something its limited vocabulary cannot
    contain (TIME_* values)."""


# -- database ---------------------------------------------------------------

@dataclass
class DbRecord:
    name: str
    rtype: RecordType
    scan: ScanSpec
    link: str
    limits: AlarmLimits = field(default_factory=AlarmLimits)
    writable: bool = False
    source: str | None = None

    def make_record(self) -> Record:
        return Record(self.name, self.rtype, self.scan, self.limits, writable=self.writable)


@dataclass
class GatewayDatabase:
    prefix: str
    records: list[DbRecord] = field(default_factory=list)

    def __post_init__(self):
        seen = set()
        for r in self.records:
            if r.name in seen:
                raise DuplicateName(r.name)
            seen.add(r.name)
            if r.name != self.prefix + r.link:
                raise DatabaseError(f"{r.name!r} is not {self.prefix!r} + {r.link!r}")

    def __len__(self):
        return len(self.records)


def generate_database(variables, prefix: str = DEFAULT_PREFIX, include_source: bool = True) -> GatewayDatabase:
    """One record per variable, typed through the Double/Boolean mapping.
    Alarm limits stay disabled unless the PV list provides them."""
    records = []
    seen = set()
    for var in variables:
        if var.name in seen:
            raise DuplicateName(var.name)
        seen.add(var.name)
        rtype = var.rtype
        src = format_source(var.source) if include_source and var.source is not None else None
        records.append(DbRecord(validate_name(prefix + var.name), rtype, var.scan, var.name,
                                var.limits, rtype.is_output, src))
    return GatewayDatabase(prefix, records)


_LIMIT_FIELDS = ("HIHI", "HIGH", "LOW", "LOLO")


def format_database(db: GatewayDatabase) -> str:
    lines = [f"# PV database: {len(db.records)} records"]
    for r in db.records:
        lines.append(f'record({r.rtype.value}, "{r.name}") {{')
        lines.append(f'    field(SCAN, "{r.scan.scan_field}")')
        lines.append(f'    field({"OUT" if r.rtype.is_output else "INP"}, "{r.link}")')
        for fname in _LIMIT_FIELDS:
            v = getattr(r.limits, fname.lower())
            if v is not None:
                lines.append(f'    field({fname}, "{v!r}")')
        lines.append(f'    field(WRITABLE, "{"true" if r.writable else "false"}")')
        if r.source is not None:
            lines.append(f'    field(SRC, "{r.source}")')
        lines.append("}")
    return "\n".join(lines) + "\n"


_TOKEN = re.compile(r'\s+|#[^\n]*|"(?P<str>[^"\n]*)"|(?P<punct>[(){},])|(?P<word>[A-Za-z_][\w]*)')


def _tokens(text: str):
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise DatabaseError(f"unexpected character {text[pos]!r} at offset {pos}")
        pos = m.end()
        if m.group("str") is not None:
            yield ("str", m.group("str"))
        elif m.group("punct"):
            yield (m.group("punct"), m.group("punct"))
        elif m.group("word"):
            yield ("word", m.group("word"))


def parse_database(text: str, prefix: str | None = None) -> GatewayDatabase:
    toks = list(_tokens(text))
    i = 0

    def expect(kind):
        nonlocal i
        if i >= len(toks) or toks[i][0] != kind:
            got = toks[i][1] if i < len(toks) else "end of file"
            raise DatabaseError(f"expected {kind}, got {got!r}")
        i += 1
        return toks[i - 1][1]

    records = []
    while i < len(toks):
        if expect("word") != "record":
            raise DatabaseError(f"expected 'record', got {toks[i - 1][1]!r}")
        expect("(")
        rtype = expect("word")
        expect(",")
        name = expect("str")
        expect(")")
        expect("{")
        fields = {}
        while i < len(toks) and toks[i][0] != "}":
            if expect("word") != "field":
                raise DatabaseError(f"expected 'field' in record {name}")
            expect("(")
            fname = expect("word").upper()
            expect(",")
            fields[fname] = expect("str")
            expect(")")
        expect("}")
        try:
            rt = RecordType(rtype)
        except ValueError:
            raise DatabaseError(f"unsupported record type {rtype!r}") from None
        link = fields.get("OUT" if rt.is_output else "INP", fields.get("INP", fields.get("OUT")))
        if link is None:
            raise DatabaseError(f"record {name} has no INP/OUT link")
        try:
            limits = AlarmLimits(*(float(fields[f]) if f in fields else None for f in ("LOLO", "LOW", "HIGH", "HIHI")))
            scan = parse_scan(fields.get("SCAN", "1 second"))
        except ValueError as exc:
            raise DatabaseError(f"record {name}: {exc}") from None
        writable = fields.get("WRITABLE", "true" if rt.is_output else "false").lower() == "true"
        records.append(DbRecord(validate_name(name), rt, scan, link, limits, writable, fields.get("SRC")))
    if prefix is None:
        prefix = records[0].name[: len(records[0].name) - len(records[0].link)] if records else ""
    return GatewayDatabase(prefix, records)


def load_database(path) -> GatewayDatabase:
    return parse_database(Path(path).read_text())


def save_database(db: GatewayDatabase, path):
    Path(path).write_text(format_database(db))


def strip_prefix(db: GatewayDatabase) -> GatewayDatabase:
    """The same database with published names equal to the upstream names."""
    return GatewayDatabase("", [DbRecord(r.link, r.rtype, r.scan, r.link, r.limits, r.writable, r.source)
                                for r in db.records])


def db_variables(db: GatewayDatabase) -> list[SharedVariable]:
    """Shared variables for a database whose records carry SRC fields."""
    out = []
    for r in db.records:
        if r.source is None:
            raise DatabaseError(f"record {r.name} has no SRC field")
        ptype = "Double" if r.rtype.is_analog else "Boolean"
        direction = "output" if r.rtype.is_output else "input"
        out.append(SharedVariable(r.name, ptype, direction, r.scan, parse_source(r.source), r.limits))
    return out


# -- mirroring --------------------------------------------------------------

class LinkState(Enum):
    CONNECTED = "Connected"
    DISCONNECTED = "Disconnected"


@dataclass(eq=False)
class MirrorEntry:
    upstream_name: str
    published_name: str
    record: Record
    subscription: int | None = None
    link: LinkState = LinkState.DISCONNECTED
    upstream_channel: ChannelInfo | None = None
    channel: netio.Channel | None = None
    has_value: bool = False


def enrich(sample: WireValue, entry: MirrorEntry, now: float) -> QualifiedValue:
    """Attach a gateway-side timestamp and alarm to an upstream PLAIN value."""
    if sample.dtype.is_time:
        raise UpstreamContractError(f"upstream sent {sample.dtype.name} for {entry.upstream_name}")
    if sample.dtype.is_enum == entry.record.rtype.is_analog:
        raise TypeMismatch(f"{sample.dtype.name} does not fit {entry.record.rtype.value} record {entry.published_name}")
    return process_record(entry.record, sample.value, now)


class Gateway:
    def __init__(self, db: GatewayDatabase, upstream: tuple[str, int], *,
                 echo_period: float = netio.ECHO_PERIOD_S, reconnect_s: float = 1.0,
                 drop_event_at: int | None = None):
        self.db = db
        self.upstream_addr = upstream
        self.echo_period = echo_period
        self.reconnect_s = reconnect_s
        self.server = netio.PVServer(allow_multi=True, echo_period=echo_period,
                                     drop_event_at=drop_event_at, label="gateway")
        self.entries: dict[str, MirrorEntry] = {}
        self._by_sub: dict[int, MirrorEntry] = {}
        for r in db.records:
            entry = MirrorEntry(r.link, r.name, r.make_record())
            ch = netio.Channel(r.name, r.rtype.dtype, get=self._getter(entry),
                               put=self._putter(entry), writable=entry.record.writable)
            entry.channel = self.server.add_channel(ch)
            self.entries[r.name] = entry
        self.client: PVClient | None = None
        self.init_time_s: float | None = None
        self.upstream_events = 0
        self.contract_violations = 0
        self.type_errors = 0
        self._waiting_first: set[str] = set()
        self._first_done: asyncio.Event | None = None
        self._reconnect_task: asyncio.Task | None = None
        self._closing = False

    # channel callbacks
    def _getter(self, entry):
        def get():
            return entry.record.wire_value()
        return get

    def _putter(self, entry):
        async def put(value: WireValue) -> Status:
            return await self.write_through(entry.published_name, value.value)
        return put

    async def write_through(self, published_name: str, value) -> Status:
        """Forward a put to the upstream PV. The new value is republished only
        when the upstream's own update arrives on the subscription."""
        entry = self.entries.get(published_name)
        if entry is None:
            return Status.NOT_FOUND
        if not entry.record.writable:
            return Status.ACCESS_DENIED
        if entry.link is not LinkState.CONNECTED or self.client is None or entry.upstream_channel is None:
            return Status.DISCONNECTED
        if entry.record.rtype.is_analog:
            value = float(value)
        elif value not in (0, 1):
            return Status.TYPE_MISMATCH
        try:
            return await self.client.write(entry.upstream_channel, value)
        except netio.Disconnected:
            return Status.DISCONNECTED

    # upstream side
    def _on_upstream(self, entry: MirrorEntry, sample: WireValue):
        self.upstream_events += 1
        try:
            qv = enrich(sample, entry, wallclock())
        except UpstreamContractError:
            self.contract_violations += 1
            logger.error("upstream contract violation on %s: %s", entry.upstream_name, sample.dtype.name)
            qv = mark_disconnected(entry.record, wallclock())
        except TypeMismatch as exc:
            self.type_errors += 1
            logger.error("%s", exc)
            return
        self.server.post(entry.channel, qv.to_wire(entry.record.dtype))
        if not entry.has_value:
            entry.has_value = True
            self._waiting_first.discard(entry.published_name)
            if not self._waiting_first and self._first_done is not None:
                self._first_done.set()

    def _on_disconnect(self, reason: str):
        logger.warning("upstream link lost: %s", reason)
        now = wallclock()
        for entry in self.entries.values():
            entry.link = LinkState.DISCONNECTED
            entry.subscription = None
            entry.upstream_channel = None
            qv = mark_disconnected(entry.record, now)
            self.server.post(entry.channel, qv.to_wire(entry.record.dtype))
        self._by_sub.clear()
        if not self._closing and (self._reconnect_task is None or self._reconnect_task.done()):
            self._reconnect_task = asyncio.ensure_future(self._reconnect_loop())

    async def _link(self):
        host, port = self.upstream_addr
        client = await PVClient.connect(host, port, echo_period=self.echo_period, label="gateway-upstream")
        self.client = client
        client.on_disconnect.append(self._on_disconnect)
        entries = list(self.entries.values())
        infos = await client.create_channels([e.upstream_name for e in entries])
        for entry in entries:
            info = infos[entry.upstream_name]
            if info is None:
                logger.error("upstream has no PV %s", entry.upstream_name)
                self._waiting_first.discard(entry.published_name)
                continue
            if info.dtype.is_time:
                self.contract_violations += 1
                logger.error("upstream advertises %s for %s", info.dtype.name, entry.upstream_name)
                self._waiting_first.discard(entry.published_name)
                continue
            if info.dtype.is_enum == entry.record.rtype.is_analog:
                self.type_errors += 1
                logger.error("upstream type %s does not fit %s", info.dtype.name, entry.published_name)
                self._waiting_first.discard(entry.published_name)
                continue
            entry.upstream_channel = info
            entry.link = LinkState.CONNECTED
            entry.subscription = client.subscribe(info, lambda v, e=entry: self._on_upstream(e, v))
        if not self._waiting_first and self._first_done is not None:
            self._first_done.set()

    async def _reconnect_loop(self):
        while not self._closing:
            await asyncio.sleep(self.reconnect_s)
            try:
                await self._link()
                logger.info("upstream link restored")
                return
            except (netio.ClientError, OSError, asyncio.TimeoutError) as exc:
                logger.debug("reconnect failed: %s", exc)

    async def start(self, host: str = "127.0.0.1", port: int = 0, connect_timeout: float = 10.0,
                    init_timeout: float = 120.0) -> tuple[str, int]:
        t_start = time.perf_counter()
        try:
            addr = await self.server.start(host, port)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self._waiting_first = set(self.entries)
        self._first_done = asyncio.Event()
        if not self._waiting_first:
            self._first_done.set()
        deadline = time.monotonic() + connect_timeout
        while True:
            try:
                await self._link()
                break
            except (netio.ClientError, OSError) as exc:
                if time.monotonic() > deadline:
                    await self.server.close()
                    raise UpstreamUnreachable(f"{self.upstream_addr}: {exc}") from exc
                await asyncio.sleep(0.2)
        await asyncio.wait_for(self._first_done.wait(), init_timeout)
        self.init_time_s = time.perf_counter() - t_start
        logger.info("gateway serving %d PVs on %s:%d (init %.3f s)", len(self.entries), *addr, self.init_time_s)
        return addr

    @property
    def address(self):
        return self.server.address

    async def close(self):
        self._closing = True
        if self._reconnect_task:
            self._reconnect_task.cancel()
        if self.client:
            self.client.close()
        await self.server.close()


async def serve_gateway(db: GatewayDatabase, upstream: str, bind: str = "127.0.0.1:0", **kw) -> Gateway:
    gw = Gateway(db, netio.parse_addr(upstream), **kw)
    host, port = netio.parse_addr(bind)
    await gw.start(host, port)
    return gw
