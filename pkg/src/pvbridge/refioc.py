"""Reference IOC: the same records served directly, with no upstream hop.

Records are bound straight to signal sources (the database ``SRC`` field),
processed by the shared scan driver and served as TIME_* values.
"""
from __future__ import annotations

import asyncio
import logging
import time

from . import netio
from .gateway import DbRecord, GatewayDatabase, db_variables
from .pvcore import Record, TypeMismatch, coerce_raw, process_record, wallclock
from .upstream import BindFailure, DuplicateName, ScanDriver, SimConfig, Simulation
from .wire import Status, WireValue

logger = logging.getLogger(__name__)

DirectDatabase = GatewayDatabase  # prefix "", every record carries SRC


class DatabaseMismatch(Exception):
    pass


def _signature(r: DbRecord):
    return (r.link, r.rtype, r.scan, r.limits, r.writable)


def check_consistency(gateway_db: GatewayDatabase, direct_db: GatewayDatabase):
    """Both arms must define the same records modulo the gateway prefix."""
    a = [_signature(r) for r in gateway_db.records]
    b = [_signature(r) for r in direct_db.records]
    if len(a) != len(b):
        raise DatabaseMismatch(f"record counts differ: {len(a)} vs {len(b)}")
    for x, y in zip(sorted(a, key=lambda s: s[0]), sorted(b, key=lambda s: s[0])):
        if x != y:
            raise DatabaseMismatch(f"record differs: {x} vs {y}")


class ReferenceIOC:
    def __init__(self, db: DirectDatabase, config: SimConfig = SimConfig(), *,
                 echo_period: float = netio.ECHO_PERIOD_S, drop_event_at: int | None = None):
        names = [r.name for r in db.records]
        if len(set(names)) != len(names):
            dup = next(n for n in names if names.count(n) > 1)
            raise DuplicateName(dup)
        self.db = db
        variables = db_variables(db)
        self.variables = {v.name: v for v in variables}
        self.records: dict[str, Record] = {r.name: r.make_record() for r in db.records}
        self.server = netio.PVServer(allow_multi=True, echo_period=echo_period,
                                     drop_event_at=drop_event_at, label="refioc")
        self.channels: dict[str, netio.Channel] = {}
        for name, rec in self.records.items():
            ch = netio.Channel(name, rec.dtype, get=rec.wire_value, put=self._putter(name),
                               writable=rec.writable)
            self.channels[name] = self.server.add_channel(ch)
        self.sim = Simulation(variables, config)
        self.driver = ScanDriver(self.sim, variables, self._on_update)
        self.init_time_s: float | None = None
        self._task: asyncio.Task | None = None

    def _on_update(self, var, raw):
        rec = self.records[var.name]
        qv = process_record(rec, raw, wallclock())
        self.server.post(self.channels[var.name], qv.to_wire(rec.dtype))

    def _putter(self, name):
        def put(value: WireValue) -> Status:
            rec = self.records[name]
            var = self.variables[name]
            if var.direction != "output":
                return Status.ACCESS_DENIED
            try:
                raw = coerce_raw(rec.rtype, value.value)
            except TypeMismatch:
                return Status.TYPE_MISMATCH
            self.driver.write(var, raw)
            return Status.OK
        return put

    async def start(self, host="127.0.0.1", port=0) -> tuple[str, int]:
        t_start = time.perf_counter()
        try:
            addr = await self.server.start(host, port)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self.driver.start(time.monotonic())
        self._task = asyncio.ensure_future(self.driver.run())
        self.init_time_s = time.perf_counter() - t_start
        logger.info("refioc serving %d records on %s:%d (init %.3f s)", len(self.records), *addr, self.init_time_s)
        return addr

    @property
    def address(self):
        return self.server.address

    async def close(self):
        if self._task:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        await self.server.close()


async def serve_refioc(db: DirectDatabase, bind: str = "127.0.0.1:0", config: SimConfig = SimConfig(),
                       **kw) -> ReferenceIOC:
    ioc = ReferenceIOC(db, config, **kw)
    host, port = netio.parse_addr(bind)
    await ioc.start(host, port)
    return ioc
