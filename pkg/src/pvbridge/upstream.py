"""The limited upstream PV server.

It publishes bare PLAIN values (no alarms, no timestamps, no record fields)
for a list of shared variables driven by simulated signals, a first-order
plant under PI control and a small state machine.

PV-list grammar, one variable per line (``#`` starts a comment)::

    name,type,direction,scan[,source][,alarm:lolo,low,high,hihi]

* ``type``: ``Double`` or ``Boolean``; ``direction``: ``input`` or ``output``
* ``scan``: ``periodic:<seconds>`` or ``event``
* ``source`` (required to serve, optional for database generation):

  ================================  ==========================================
  ``sine:A,f,phase,offset``         offset + A*sin(2*pi*f*t + phase)   (Double)
  ``noise:mean,stddev,seed``        seeded normal draws                (Double)
  ``toggle:period``                 floor(t/period) mod 2             (Boolean)
  ``const:v``                       constant; holds writes on outputs   (both)
  ``counter``                       1, 2, 3, ... per processing       (Double)
  ``plant`` / ``control``           plant output x / controller output u
  ``fsm``                           state code 0 Idle, 1 Running, 2 Fault
  ``setpoint`` / ``kp`` / ``ki``    plant parameter; writes set it  (Double out)
  ``cmd:<event>``                   writing 1 fires start/stop/fault/reset
  ================================  ==========================================

* ``alarm:`` limits are only used by the gateway database generator; empty
  entries disable a limit (``alarm:,,8,9``).

Event-scanned variables are processed on every simulation event: state
machine transitions and plant-output threshold crossings. Output variables
are also processed on every write.
"""
from __future__ import annotations

import asyncio
import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from . import netio
from .pvcore import (AlarmLimits, Event, Periodic, PVError, ScanEngine, ScanSpec, map_pv_type, parse_scan,
                     validate_name)
from .wire import DType, Status, WireValue

logger = logging.getLogger(__name__)

DEFAULT_PREFIX = "NIOC:"


class UpstreamError(Exception):
    pass


class DuplicateName(UpstreamError):
    pass


class ReservedPrefix(UpstreamError):
    pass


class BindFailure(UpstreamError):
    pass


class PvListError(UpstreamError):
    pass


# -- signal sources ---------------------------------------------------------

@dataclass(frozen=True)
class Sine:
    amplitude: float
    frequency_hz: float
    phase: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        if not self.frequency_hz > 0:
            raise ValueError("sine frequency must be positive")


@dataclass(frozen=True)
class Noise:
    mean: float
    stddev: float
    seed: int = 0

    def __post_init__(self):
        if not self.stddev >= 0:
            raise ValueError("noise stddev must be non-negative")


@dataclass(frozen=True)
class Toggle:
    period_s: float

    def __post_init__(self):
        if not self.period_s > 0:
            raise ValueError("toggle period must be positive")


@dataclass(frozen=True)
class Constant:
    v: float


@dataclass(frozen=True)
class Counter:
    pass


@dataclass(frozen=True)
class PlantOutput:
    pass


@dataclass(frozen=True)
class ControllerOutput:
    pass


@dataclass(frozen=True)
class FsmOutput:
    pass


@dataclass(frozen=True)
class PlantParam:
    param: str  # "setpoint", "kp" or "ki"


@dataclass(frozen=True)
class FsmCommand:
    event: str


SignalSource = (Sine | Noise | Toggle | Constant | Counter | PlantOutput | ControllerOutput
                | FsmOutput | PlantParam | FsmCommand)

_BOOLEAN_SOURCES = (Toggle, Constant, FsmCommand)
_DOUBLE_SOURCES = (Sine, Noise, Constant, Counter, PlantOutput, ControllerOutput, FsmOutput, PlantParam)

_NOISE_BLOCK = 1024
_noise_cache: dict[tuple, np.ndarray] = {}


def _noise_block(key: tuple) -> np.ndarray:
    block = _noise_cache.get(key)
    if block is None:
        if len(_noise_cache) > 4096:
            _noise_cache.clear()
        block = np.random.default_rng(list(key)).standard_normal(_NOISE_BLOCK)
        _noise_cache[key] = block
    return block


def sample_source(source: SignalSource, t_s: float, index: int = 0, base_seed: int = 0):
    """Value of a stateless source at logical time ``t_s``.

    ``index`` is the draw number for :class:`Noise` (draw ``i`` is fixed by
    ``(base_seed, seed, i)``) and the zero-based processing count for
    :class:`Counter`.
    """
    if t_s < 0:
        raise ValueError("t_s must be non-negative")
    if isinstance(source, Sine):
        return source.offset + source.amplitude * math.sin(
            2 * math.pi * source.frequency_hz * t_s + source.phase)
    if isinstance(source, Toggle):
        return int(math.floor(t_s / source.period_s)) % 2
    if isinstance(source, Noise):
        block = _noise_block((base_seed, source.seed, index // _NOISE_BLOCK))
        return source.mean + source.stddev * float(block[index % _NOISE_BLOCK])
    if isinstance(source, Constant):
        return source.v
    if isinstance(source, Counter):
        return float(index + 1)
    raise ValueError(f"{type(source).__name__} needs simulation state")


# -- plant and controller ---------------------------------------------------

@dataclass(frozen=True)
class PlantState:
    """First-order plant ``tau*dx/dt = -x + k_gain*u`` under PI control.

    With ``manual`` set the controller is bypassed and ``u`` is held.
    """

    x: float = 0.0
    u: float = 0.0
    setpoint: float = 1.0
    kp: float = 2.0
    ki: float = 1.0
    integrator: float = 0.0
    tau_s: float = 1.0
    k_gain: float = 1.0
    manual: bool = False

    def __post_init__(self):
        if not self.tau_s > 0:
            raise ValueError("tau_s must be positive")


def plant_step(state: PlantState, dt_s: float) -> PlantState:
    if not 0 < dt_s < state.tau_s:
        raise ValueError("need 0 < dt_s < tau_s")
    if state.manual:
        integrator, u = state.integrator, state.u
    else:
        e = state.setpoint - state.x
        integrator = state.integrator + e * dt_s
        u = state.kp * e + state.ki * integrator
    x = state.x + dt_s * (-state.x + state.k_gain * u) / state.tau_s
    return replace(state, x=x, u=u, integrator=integrator)


# -- state machine ----------------------------------------------------------

class FsmState(Enum):
    IDLE = 0
    RUNNING = 1
    FAULT = 2


FSM_EVENTS = ("start", "stop", "fault", "reset")


def fsm_step(state: FsmState, event: str) -> FsmState:
    if event == "fault":
        return FsmState.FAULT
    if state is FsmState.IDLE and event == "start":
        return FsmState.RUNNING
    if state is FsmState.RUNNING and event == "stop":
        return FsmState.IDLE
    if state is FsmState.FAULT and event == "reset":
        return FsmState.IDLE
    return state


# -- variables and PV lists -------------------------------------------------

@dataclass
class SharedVariable:
    name: str
    published_type: str
    direction: str
    scan: ScanSpec
    source: SignalSource | None = None
    limits: AlarmLimits = field(default_factory=AlarmLimits)

    def __post_init__(self):
        validate_name(self.name)
        self.rtype, _ = map_pv_type(self.published_type, self.direction)
        if self.source is not None:
            allowed = _DOUBLE_SOURCES if self.published_type == "Double" else _BOOLEAN_SOURCES
            if not isinstance(self.source, allowed):
                raise PvListError(f"{self.name}: source {self.source} not valid for {self.published_type}")
            if isinstance(self.source, (PlantParam, FsmCommand)) and self.direction != "output":
                raise PvListError(f"{self.name}: {self.source} binds an output variable")
            if self.published_type == "Boolean" and isinstance(self.source, Constant) and self.source.v not in (0, 1):
                raise PvListError(f"{self.name}: Boolean constant must be 0 or 1")

    @property
    def dtype(self) -> DType:
        return DType.PLAIN_DOUBLE if self.published_type == "Double" else DType.PLAIN_ENUM

    @property
    def is_event(self) -> bool:
        return isinstance(self.scan, Event)


_ARITY = {"sine": 4, "noise": 3, "toggle": 1, "const": 1, "counter": 0, "plant": 0,
          "control": 0, "fsm": 0, "setpoint": 0, "kp": 0, "ki": 0, "cmd": 1, "alarm": 4}


def _build_source(kind: str, args: list[str]) -> SignalSource:
    f = [float(a) for a in args] if kind not in ("cmd",) else args
    if kind == "sine":
        return Sine(*f)
    if kind == "noise":
        return Noise(f[0], f[1], int(f[2]))
    if kind == "toggle":
        return Toggle(f[0])
    if kind == "const":
        return Constant(f[0])
    if kind == "counter":
        return Counter()
    if kind == "plant":
        return PlantOutput()
    if kind == "control":
        return ControllerOutput()
    if kind == "fsm":
        return FsmOutput()
    if kind in ("setpoint", "kp", "ki"):
        return PlantParam(kind)
    if kind == "cmd":
        if args[0] not in FSM_EVENTS:
            raise PvListError(f"unknown state machine event {args[0]!r}")
        return FsmCommand(args[0])
    raise PvListError(f"unknown source kind {kind!r}")


def format_source(source: SignalSource) -> str:
    if isinstance(source, Sine):
        return f"sine:{source.amplitude!r},{source.frequency_hz!r},{source.phase!r},{source.offset!r}"
    if isinstance(source, Noise):
        return f"noise:{source.mean!r},{source.stddev!r},{source.seed}"
    if isinstance(source, Toggle):
        return f"toggle:{source.period_s!r}"
    if isinstance(source, Constant):
        return f"const:{source.v!r}"
    if isinstance(source, PlantParam):
        return source.param
    if isinstance(source, FsmCommand):
        return f"cmd:{source.event}"
    return {Counter: "counter", PlantOutput: "plant", ControllerOutput: "control", FsmOutput: "fsm"}[type(source)]


def parse_source(text: str) -> SignalSource:
    """Parse a single source spec such as ``sine:1,0.2,0,5``."""
    tokens = next(csv.reader([text]))
    kind, _, first = tokens[0].partition(":")
    args = ([first] if first != "" or _ARITY.get(kind, 0) else []) + tokens[1:]
    return _build_source(kind.strip().lower(), [a.strip() for a in args])


def _parse_limits(args: list[str]) -> AlarmLimits:
    return AlarmLimits(*(float(a) if a.strip() else None for a in args))


def parse_pvlist_line(line: str) -> SharedVariable | None:
    text = line.split("#", 1)[0].strip()
    if not text:
        return None
    tokens = [t.strip() for t in next(csv.reader([text]))]
    if len(tokens) < 4:
        raise PvListError(f"need at least name,type,direction,scan: {line!r}")
    name, ptype, direction, scan = tokens[:4]
    rest = tokens[4:]
    source = None
    limits = AlarmLimits()
    i = 0
    while i < len(rest):
        kind, _, first = rest[i].partition(":")
        kind = kind.strip().lower()
        if kind not in _ARITY:
            raise PvListError(f"unknown field {rest[i]!r} in {line!r}")
        n = _ARITY[kind]
        args = ([first] if n else []) + rest[i + 1:i + n]
        if len(args) != n:
            raise PvListError(f"{kind} takes {n} arguments: {line!r}")
        i += max(n, 1)
        if kind == "alarm":
            limits = _parse_limits(args)
        elif source is None:
            source = _build_source(kind, args)
        else:
            raise PvListError(f"more than one source in {line!r}")
    try:
        return SharedVariable(name, ptype, direction, parse_scan(scan), source, limits)
    except (ValueError, KeyError, PVError) as exc:
        raise PvListError(f"{line!r}: {exc}") from exc


def parse_pvlist(text: str) -> list[SharedVariable]:
    out = []
    for n, line in enumerate(io.StringIO(text), 1):
        try:
            var = parse_pvlist_line(line)
        except PvListError as exc:
            raise PvListError(f"line {n}: {exc}") from None
        if var is not None:
            out.append(var)
    return out


def load_pvlist(path) -> list[SharedVariable]:
    return parse_pvlist(Path(path).read_text())


def format_pvlist_line(var: SharedVariable) -> str:
    parts = [var.name, var.published_type, var.direction, str(var.scan)]
    if var.source is not None:
        parts.append(format_source(var.source))
    lim = var.limits
    if lim.any_enabled:
        parts.append("alarm:" + ",".join("" if v is None else repr(v) for v in (lim.lolo, lim.low, lim.high, lim.hihi)))
    return ",".join(parts)


def check_variables(variables, prefix: str = DEFAULT_PREFIX):
    seen = set()
    for var in variables:
        if var.name in seen:
            raise DuplicateName(var.name)
        seen.add(var.name)
        if prefix and var.name.startswith(prefix):
            raise ReservedPrefix(f"{var.name!r} starts with the reserved prefix {prefix!r}")
        if var.source is None:
            raise PvListError(f"{var.name}: no signal source")


# -- deterministic simulation -----------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    seed: int = 0
    dt_s: float = 0.01
    fsm_cycle_s: float | None = 20.0
    thresholds: tuple[float, ...] = (0.5,)
    event_tick_s: float = 0.1
    plant: PlantState = field(default_factory=PlantState)


class _SimTick:
    """Pseudo scan item that keeps the simulation clock moving."""

    name = "__sim__"

    def __init__(self, period):
        self.scan = Periodic(period)


class Simulation:
    """Signals, plant and state machine advanced on a logical clock.

    Nothing here reads the wall clock: two simulations with the same
    variables and config produce the same value sequences when processed
    at the same logical times.
    """

    def __init__(self, variables, config: SimConfig = SimConfig()):
        self.variables = {v.name: v for v in variables}
        self.config = config
        self.plant = config.plant
        self.fsm = FsmState.IDLE
        self._steps = 0
        self._cycle_steps = round(config.fsm_cycle_s / config.dt_s) if config.fsm_cycle_s else 0
        self.counts = {name: 0 for name in self.variables}
        self.held = {}
        for v in variables:
            if isinstance(v.source, Constant):
                self.held[v.name] = v.source.v
            elif isinstance(v.source, FsmCommand):
                self.held[v.name] = 0
        self._apply_fsm_mode()

    @property
    def t(self) -> float:
        return self._steps * self.config.dt_s

    def _apply_fsm_mode(self):
        if self.fsm is FsmState.RUNNING:
            self.plant = replace(self.plant, manual=False)
        else:
            self.plant = replace(self.plant, manual=True, u=0.0)

    def fire(self, event: str) -> bool:
        """Apply a state machine event; returns True if the state changed."""
        new = fsm_step(self.fsm, event)
        if new is self.fsm:
            return False
        self.fsm = new
        self._apply_fsm_mode()
        return True

    def advance_to(self, t: float, on_event=None):
        """Step the plant up to logical time ``t``. ``on_event(t_event)`` is
        called inline for each transition or threshold crossing."""
        dt = self.config.dt_s
        target = math.floor(t / dt + 1e-9)
        while self._steps < target:
            if self._cycle_steps and self._steps % self._cycle_steps == 0:
                cycle = self._steps // self._cycle_steps
                if self.fire("start" if cycle % 2 == 0 else "stop") and on_event:
                    on_event(self._steps * dt)
            x0 = self.plant.x
            self.plant = plant_step(self.plant, dt)
            self._steps += 1
            x1 = self.plant.x
            if on_event and any((x0 < th) != (x1 < th) for th in self.config.thresholds):
                on_event(self._steps * dt)

    def sample(self, name: str, t: float):
        """Produce the next raw value of ``name`` at logical time ``t``."""
        var = self.variables[name]
        src = var.source
        index = self.counts[name]
        self.counts[name] = index + 1
        if name in self.held:
            raw = self.held[name]
        elif isinstance(src, PlantOutput):
            raw = self.plant.x
        elif isinstance(src, ControllerOutput):
            raw = self.plant.u
        elif isinstance(src, FsmOutput):
            raw = float(self.fsm.value)
        elif isinstance(src, PlantParam):
            raw = getattr(self.plant, src.param)
        else:
            raw = sample_source(src, t, index, self.config.seed)
        if var.published_type == "Boolean":
            return int(raw)
        return float(raw)

    def write(self, name: str, raw) -> bool:
        """Apply a write to an output variable; returns True if it caused a
        state machine transition."""
        var = self.variables[name]
        src = var.source
        if isinstance(src, PlantParam):
            self.plant = replace(self.plant, **{src.param: float(raw)})
            return False
        if isinstance(src, FsmCommand):
            self.held[name] = int(raw)
            return bool(int(raw)) and self.fire(src.event)
        self.held[name] = int(raw) if var.published_type == "Boolean" else float(raw)
        return False


def scan_phases(periods) -> dict[float, float]:
    """First-due offset per scan period: the k-th shortest of n distinct
    periods starts at k * shortest / n, so scans of different periods never
    fall due at the same instant and a long scan cannot delay a short one."""
    distinct = sorted(set(periods))
    if not distinct:
        return {}
    step = distinct[0] / len(distinct)
    return {p: k * step for k, p in enumerate(distinct)}


class ScanDriver:
    """Processes variables on the fixed-phase schedule against a Simulation.

    ``on_update(var, raw)`` is called for every processing, in a
    deterministic order given the variable list and config.
    """

    def __init__(self, sim: Simulation, variables, on_update):
        self.sim = sim
        self.on_update = on_update
        self.event_vars = [v for v in variables if v.is_event]
        self.engine = ScanEngine()
        self.engine.add(_SimTick(sim.config.event_tick_s))
        phases = scan_phases(v.scan.period_s for v in variables if isinstance(v.scan, Periodic))
        self.phased_vars = []
        for v in variables:
            if isinstance(v.scan, Periodic):
                self.engine.add(v, phases[v.scan.period_s])
                if phases[v.scan.period_s] > 0:
                    self.phased_vars.append(v)
        self._started = False
        self.paused = False

    def _process(self, var, t):
        self.on_update(var, self.sim.sample(var.name, t))

    def _on_event(self, t):
        for var in self.event_vars:
            self._process(var, t)

    def start(self, t0: float):
        """Initial processing at logical time 0: every event variable and
        every periodic variable once, then the regular schedule."""
        self.engine.t0 = t0
        self._started = True
        self.sim.advance_to(0.0, self._on_event)
        self._on_event(0.0)
        # so every value is defined at start, including scans phased later
        for var in self.phased_vars:
            self._process(var, 0.0)
        self.run_until(t0)

    def run_until(self, now: float) -> int:
        n = 0
        for item, off in self.engine.due(now):
            self.sim.advance_to(off, self._on_event)
            if item.name != _SimTick.name:
                self._process(item, off)
            n += 1
        return n

    def write(self, var, raw):
        if self.sim.write(var.name, raw):
            self._on_event(self.sim.t)
        self._process(var, self.sim.t)

    async def run(self, clock=time.monotonic):
        if not self._started:
            self.start(clock())
        while True:
            nd = self.engine.next_due()
            delay = nd - clock() if nd is not None else 3600.0
            if delay > 0:
                await asyncio.sleep(delay)
            if not self.paused:
                self.run_until(clock())
            else:
                self.engine.due(clock())


def offline_sequences(variables, config: SimConfig, duration_s: float) -> dict[str, list]:
    """Run the driver on a simulated clock; returns each variable's value
    sequence. Used as the reference for cross-run determinism checks."""
    seqs: dict[str, list] = {v.name: [] for v in variables}
    driver = ScanDriver(Simulation(variables, config), variables,
                        lambda var, raw: seqs[var.name].append(raw))
    driver.start(0.0)
    driver.run_until(duration_s)
    return seqs


# -- the server -------------------------------------------------------------

class UpstreamServer:
    """Serves PLAIN_* values for shared variables. READ_MULTI is not offered."""

    def __init__(self, variables, config: SimConfig = SimConfig(), *, prefix: str = DEFAULT_PREFIX,
                 echo_period: float = netio.ECHO_PERIOD_S, drop_event_at: int | None = None):
        variables = list(variables)
        check_variables(variables, prefix)
        self.variables = {v.name: v for v in variables}
        self.sim = Simulation(variables, config)
        self.values: dict[str, WireValue] = {}
        self.server = netio.PVServer(allow_multi=False, echo_period=echo_period,
                                     drop_event_at=drop_event_at, label="upstream")
        self.channels: dict[str, netio.Channel] = {}
        for v in variables:
            self.values[v.name] = WireValue(v.dtype, 0 if v.dtype == DType.PLAIN_ENUM else 0.0)
            ch = netio.Channel(v.name, v.dtype, get=self._getter(v.name),
                               put=self._putter(v) if v.direction == "output" else None,
                               writable=v.direction == "output")
            self.channels[v.name] = self.server.add_channel(ch)
        self.driver = ScanDriver(self.sim, variables, self._on_update)
        self.updates = 0
        self.deploy_time_s: float | None = None
        self._task: asyncio.Task | None = None
        self.frozen = False

    def _getter(self, name):
        return lambda: self.values[name]

    def _putter(self, var):
        def put(value: WireValue) -> Status:
            raw = int(value.value) if var.published_type == "Boolean" else float(value.value)
            if var.published_type == "Boolean" and raw not in (0, 1):
                return Status.TYPE_MISMATCH
            self.driver.write(var, raw)
            return Status.OK
        return put

    def _on_update(self, var, raw):
        v = WireValue(var.dtype, raw)
        self.values[var.name] = v
        self.updates += 1
        self.server.post(self.channels[var.name], v)

    async def start(self, host="127.0.0.1", port=0) -> tuple[str, int]:
        t_start = time.perf_counter()
        self.driver.start(time.monotonic())
        try:
            addr = await self.server.start(host, port)
        except OSError as exc:
            raise BindFailure(f"cannot bind {host}:{port}: {exc}") from exc
        self._task = asyncio.ensure_future(self.driver.run())
        self.deploy_time_s = time.perf_counter() - t_start
        logger.info("upstream serving %d variables on %s:%d (deploy %.3f s)",
                    len(self.variables), *addr, self.deploy_time_s)
        return addr

    @property
    def address(self):
        return self.server.address

    def freeze(self):
        """Test hook: go silent without closing sockets."""
        self.frozen = True
        self.driver.paused = True
        for s in list(self.server.sessions):
            s.transport.pause_reading()
            s.send = lambda frame: None

    async def close(self):
        if self._task:
            self._task.cancel()
            try:
                await self._task
            except asyncio.CancelledError:
                pass
        await self.server.close()


async def deploy_upstream(variables, bind: str = "127.0.0.1:0", config: SimConfig = SimConfig(),
                          **kw) -> UpstreamServer:
    srv = UpstreamServer(variables, config, **kw)
    host, port = netio.parse_addr(bind)
    await srv.start(host, port)
    return srv
