"""Two-arm test bench: gateway arm (upstream + gateway) against the
reference IOC, driven over the network like any other client.

Every scenario takes a :class:`ScenarioConfig`, talks to arms only through
their addresses, and writes CSV/JSON reports under ``cfg.out``.
"""
from __future__ import annotations

import asyncio
import configparser
import contextlib
import csv
import dataclasses
import gc
import json
import logging
import math
import random
import sys
import time
from collections import Counter as Multiset
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gateway as gw_mod
from . import netio
from .archiver import Archiver, gap_scan, sample_from_wire
from .pvcore import Condition, Event, Periodic
from .refioc import DatabaseMismatch, check_consistency
from .upstream import (DEFAULT_PREFIX, Constant, Counter, FsmCommand, FsmOutput, Noise, PlantOutput,
                       ControllerOutput, PlantParam, SharedVariable, Sine, Toggle, format_pvlist_line)
from .wire import Status

logger = logging.getLogger(__name__)

SCENARIOS = ("reliability", "batched_get", "scale", "monitor_storm", "archive_integrity")
SEQ_PV = "SEQ"
MONITOR_NOTE = ("'synchronous monitors' interpreted as concurrent active subscriptions, "
                "one client connection per subscription")
PV_COUNT_NOTE = "one PV per record; the 1960-record / 9600-PV ratio is not modelled"
TIMESTAMP_NOTE = "gateway timestamps are assigned at enrichment, not at upstream acquisition"


class BenchError(Exception):
    pass


class ArmUnreachable(BenchError):
    pass


class DeployTimeout(BenchError):
    pass


class InsufficientData(BenchError):
    pass


class PartialResponse(BenchError):
    def __init__(self, failed):
        self.failed = failed
        super().__init__(f"{len(failed)} entries failed: {failed[:10]}")


@dataclass
class ScenarioConfig:
    scenario: str = "reliability"
    record_count: int = 196
    p1s_fraction: float = 0.45
    p5s_fraction: float = 0.45
    event_fraction: float = 0.10
    duration_s: float = 600.0
    monitor_count: int = 120
    monitor_sweep: tuple[int, ...] = (10, 40, 80, 120, 200)
    storm_duration_s: float = 60.0
    batch_size: int = 180
    trials: int = 100
    random_reads: int = 100
    seed: int = 0
    out: Path = Path("bench-out")
    echo_period_s: float = netio.ECHO_PERIOD_S
    counter_period_s: float = 0.1
    deploy_timeout_s: float = 120.0
    tolerance_s: float = 0.1
    constant_sources: bool = False
    drop_event_at: int | None = None

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        total = self.p1s_fraction + self.p5s_fraction + self.event_fraction
        if not math.isclose(total, 1.0, abs_tol=1e-9):
            raise ValueError(f"scan fractions sum to {total}, not 1")
        self.out = Path(self.out)
        self.monitor_sweep = tuple(int(m) for m in self.monitor_sweep)


def load_scenario(path, **overrides) -> ScenarioConfig:
    """Read ``key = value`` lines under a ``[scenario]`` section."""
    parser = configparser.ConfigParser()
    parser.read(path)
    if "scenario" not in parser:
        raise ValueError(f"{path}: no [scenario] section")
    types = {f.name: f.type for f in dataclasses.fields(ScenarioConfig)}
    kw = {}
    for key, raw in parser["scenario"].items():
        if key not in types:
            raise ValueError(f"{path}: unknown key {key!r}")
        kw[key] = _coerce(types[key], raw)
    kw.update({k: v for k, v in overrides.items() if v is not None})
    return ScenarioConfig(**kw)


def _coerce(typ: str, raw: str):
    raw = raw.strip()
    if typ.startswith("int |") and raw.lower() in ("", "none"):
        return None
    if typ.startswith("int"):
        return int(raw)
    if typ == "float":
        return float(raw)
    if typ == "bool":
        return raw.lower() in ("1", "true", "yes", "on")
    if typ.startswith("tuple"):
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw


# -- PV lists ---------------------------------------------------------------

def build_pvlist(cfg: ScenarioConfig, with_counter: bool = False) -> list[SharedVariable]:
    """Deterministic bench PV list with the configured scan mix.

    The first records of the periodic populations are bound to the plant
    loop and state machine so feedback control and event processing always
    take part; the rest are simulated analog and binary signals.
    """
    n = cfg.record_count
    n1 = round(n * cfg.p1s_fraction)
    ne = round(n * cfg.event_fraction)
    n5 = n - n1 - ne
    scans = [Periodic(1.0)] * n1 + [Periodic(5.0)] * n5 + [Event()] * ne
    rng = random.Random(cfg.seed)
    out = []
    for i, scan in enumerate(scans):
        name = f"R{i:05d}"
        if cfg.constant_sources:
            if i % 4 == 3:
                out.append(SharedVariable(name, "Boolean", "input", scan, Constant(float(i // 4 % 2))))
            else:
                out.append(SharedVariable(name, "Double", "input", scan, Constant(float(i) + 0.25)))
            continue
        special = {0: ("Double", "input", PlantOutput()), 1: ("Double", "input", ControllerOutput()),
                   2: ("Double", "output", PlantParam("setpoint"))}
        if i in special:
            ptype, direction, src = special[i]
        elif isinstance(scan, Event) and i == n1 + n5:
            ptype, direction, src = "Double", "input", FsmOutput()
        elif isinstance(scan, Event) and i == n1 + n5 + 1:
            ptype, direction, src = "Boolean", "output", FsmCommand("start")
        else:
            kind = i % 4
            if kind == 0:
                ptype, direction = "Double", "input"
                src = Sine(round(rng.uniform(0.5, 5), 3), round(rng.uniform(0.01, 0.2), 4),
                           round(rng.uniform(0, 6.28), 3), round(rng.uniform(-10, 10), 3))
            elif kind == 1:
                ptype, direction, src = "Double", "input", Noise(round(rng.uniform(-1, 1), 3), 0.1, i)
            elif kind == 2:
                ptype, direction, src = "Boolean", "input", Toggle(rng.choice((2.0, 5.0, 10.0)))
            else:
                ptype, direction, src = "Double", "output", Constant(float(i))
        out.append(SharedVariable(name, ptype, direction, scan, src))
    if with_counter:
        out.append(SharedVariable(SEQ_PV, "Double", "input", Periodic(cfg.counter_period_s), Counter()))
    return out


def write_pvlist(variables, path):
    Path(path).write_text("\n".join(format_pvlist_line(v) for v in variables) + "\n")


def nominal_periods(variables) -> dict[str, float | None]:
    return {v.name: (v.scan.period_s if isinstance(v.scan, Periodic) else None) for v in variables}


# -- arms -------------------------------------------------------------------

class ArmProcess:
    """A server subprocess that announces itself with a ``READY {json}`` line."""

    def __init__(self, proc, label, info, wall_s):
        self.proc = proc
        self.label = label
        self.info = info
        self.wall_s = wall_s

    @classmethod
    async def spawn(cls, args, label: str, log_dir: Path, timeout: float = 120.0) -> ArmProcess:
        log_dir.mkdir(parents=True, exist_ok=True)
        log = open(log_dir / f"{label}.log", "wb")
        t0 = time.perf_counter()
        proc = await asyncio.create_subprocess_exec(
            sys.executable, "-m", "pvbridge", *map(str, args),
            stdout=asyncio.subprocess.PIPE, stderr=log)
        log.close()
        try:
            while True:
                line = await asyncio.wait_for(proc.stdout.readline(), timeout - (time.perf_counter() - t0))
                if not line:
                    raise DeployTimeout(f"{label} exited with {await proc.wait()} before READY")
                if line.startswith(b"READY "):
                    break
        except asyncio.TimeoutError:
            proc.kill()
            await proc.wait()
            raise DeployTimeout(f"{label} not ready within {timeout} s") from None
        return cls(proc, label, json.loads(line[6:]), time.perf_counter() - t0)

    @property
    def addr(self) -> tuple[str, int]:
        return netio.parse_addr(self.info["addr"])

    async def stop(self):
        if self.proc.returncode is None:
            self.proc.terminate()
            try:
                await asyncio.wait_for(self.proc.wait(), 10)
            except asyncio.TimeoutError:
                self.proc.kill()
                await self.proc.wait()


@dataclass
class Arm:
    label: str
    addr: tuple[str, int]
    prefix: str
    init_wall_s: float | None = None
    init_reported_s: float | None = None
    procs: list = field(default_factory=list)

    def published(self, name: str) -> str:
        return self.prefix + name

    async def stop(self):
        for p in reversed(self.procs):
            await p.stop()


async def spawn_arms(cfg: ScenarioConfig, variables, workdir: Path, *, which=("gateway", "refioc"),
                     drop_event_at: dict | None = None) -> dict[str, Arm]:
    """Generate both databases from one PV list and start the arms as
    separate processes. The gateway arm is upstream + gateway."""
    workdir.mkdir(parents=True, exist_ok=True)
    pvlist = workdir / "pvlist.csv"
    write_pvlist(variables, pvlist)
    gw_db = gw_mod.generate_database(variables, DEFAULT_PREFIX)
    ioc_db = gw_mod.strip_prefix(gw_db)
    check_consistency(gw_db, ioc_db)
    gw_mod.save_database(gw_db, workdir / "gateway.pvdb")
    gw_mod.save_database(ioc_db, workdir / "refioc.pvdb")
    drops = drop_event_at or {}
    common = ["--echo-period", cfg.echo_period_s]
    arms = {}
    try:
        if "gateway" in which:
            up = await ArmProcess.spawn(
                ["pvup", "serve", "--db", pvlist, "--bind", "127.0.0.1:0", "--seed", cfg.seed, *common],
                "upstream", workdir, cfg.deploy_timeout_s)
            arms["gateway"] = Arm("gateway", (0, 0), DEFAULT_PREFIX, procs=[up])
            extra = ["--drop-event-at", drops["gateway"]] if drops.get("gateway") else []
            gw = await ArmProcess.spawn(
                ["pvgw", "serve", "--db", workdir / "gateway.pvdb", "--upstream", up.info["addr"],
                 "--bind", "127.0.0.1:0", *common, *extra],
                "gateway", workdir, cfg.deploy_timeout_s)
            arm = arms["gateway"]
            arm.procs.append(gw)
            arm.addr = gw.addr
            arm.init_wall_s = up.wall_s + gw.wall_s
            arm.init_reported_s = up.info["init_s"] + gw.info["init_s"]
        if "refioc" in which:
            extra = ["--drop-event-at", drops["refioc"]] if drops.get("refioc") else []
            ioc = await ArmProcess.spawn(
                ["pvioc", "serve", "--db", workdir / "refioc.pvdb", "--bind", "127.0.0.1:0",
                 "--seed", cfg.seed, *common, *extra],
                "refioc", workdir, cfg.deploy_timeout_s)
            arms["refioc"] = Arm("refioc", ioc.addr, "", ioc.wall_s, ioc.info["init_s"], [ioc])
    except BaseException:
        for arm in arms.values():
            await arm.stop()
        raise
    return arms


def external_arms(gateway: str | None, refioc: str | None) -> dict[str, Arm]:
    arms = {}
    if gateway:
        arms["gateway"] = Arm("gateway", netio.parse_addr(gateway), DEFAULT_PREFIX)
    if refioc:
        arms["refioc"] = Arm("refioc", netio.parse_addr(refioc), "")
    return arms


async def connect_arm(arm: Arm, names, cfg: ScenarioConfig, expected=None):
    """Connect and create channels for ``names`` (unprefixed). Returns the
    client and ``{name: ChannelInfo}``; raises if the arm is down or a
    channel is missing."""
    try:
        client = await netio.PVClient.connect(*arm.addr, echo_period=cfg.echo_period_s, label=f"bench-{arm.label}")
    except netio.Disconnected as exc:
        raise ArmUnreachable(f"{arm.label}: {exc}") from exc
    infos = await client.create_channels([arm.published(n) for n in names])
    chans = {}
    for n in names:
        info = infos[arm.published(n)]
        if info is None:
            client.close()
            raise DatabaseMismatch(f"{arm.label} has no PV {arm.published(n)}")
        chans[n] = info
    return client, chans


def check_surfaces(chans_a: dict, chans_b: dict):
    """Wire-visible type surface must match name by name."""
    for name, a in chans_a.items():
        b = chans_b.get(name)
        if b is None or (a.dtype, a.access) != (b.dtype, b.access):
            raise DatabaseMismatch(f"{name}: {a} vs {b}")


# -- statistics -------------------------------------------------------------

@dataclass(frozen=True)
class JitterStats:
    count: int
    mean: float
    stddev: float
    min: float
    max: float
    p50: float
    p99: float


def nearest_rank(sorted_values, p: float):
    """Nearest-rank percentile of an ascending sequence."""
    n = len(sorted_values)
    rank = max(1, math.ceil(p / 100.0 * n))
    return sorted_values[rank - 1]


def jitter_stats(intervals, nominal) -> JitterStats:
    """Statistics of ``interval - nominal`` (population stddev, nearest-rank
    percentiles). ``nominal`` is a scalar or one value per interval."""
    iv = np.asarray(intervals, dtype=float)
    if iv.size < 2:
        raise InsufficientData("jitter statistics need at least 2 intervals")
    j = iv - np.asarray(nominal, dtype=float)
    s = np.sort(j)
    return JitterStats(int(j.size), float(j.mean()), float(j.std()), float(s[0]), float(s[-1]),
                       float(nearest_rank(s, 50)), float(nearest_rank(s, 99)))


@dataclass
class JitterReport:
    arm: str
    nominal: dict[str, float]
    intervals: dict[str, list[float]]
    stats: JitterStats | None = None
    p99_abs: float = float("nan")
    within_fraction: float = float("nan")
    tolerance_s: float = 0.1

    @classmethod
    def build(cls, arm, nominal, intervals, tolerance_s=0.1) -> JitterReport:
        rep = cls(arm, dict(nominal), {k: list(v) for k, v in intervals.items()}, tolerance_s=tolerance_s)
        iv, nom = rep.flat()
        if iv.size >= 2:
            rep.stats = jitter_stats(iv, nom)
            absj = np.sort(np.abs(iv - nom))
            rep.p99_abs = float(nearest_rank(absj, 99))
            rep.within_fraction = float(np.mean(absj <= tolerance_s))
        return rep

    def flat(self):
        iv, nom = [], []
        for pv, vals in self.intervals.items():
            iv.extend(vals)
            nom.extend([self.nominal[pv]] * len(vals))
        return np.asarray(iv, dtype=float), np.asarray(nom, dtype=float)

    @property
    def interval_count(self) -> int:
        return sum(len(v) for v in self.intervals.values())


def histogram_rows(jitter_s, bin_ms: float = 1.0):
    """Rows ``(bin_low_ms, bin_high_ms, count)`` for non-empty bins."""
    ms = np.asarray(jitter_s, dtype=float) * 1000.0
    bins = Multiset(np.floor(ms / bin_ms).astype(int).tolist())
    return [(b * bin_ms, (b + 1) * bin_ms, c) for b, c in sorted(bins.items())]


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# -- monitoring -------------------------------------------------------------

class ArmMonitor:
    """Subscribes to every PV of one arm and keeps arrival times and values."""

    def __init__(self, arm: Arm, client, chans, archiver: Archiver | None = None):
        self.arm = arm
        self.client = client
        self.chans = chans
        self.archiver = archiver
        self.arrivals: dict[str, list[float]] = {n: [] for n in chans}
        self.values: dict[str, list] = {n: [] for n in chans}
        self.unreachable: list[dict] = []
        self.active = True
        client.on_disconnect.append(self._lost)

    def _lost(self, reason):
        if self.active:
            self.unreachable.append({"arm": self.arm.label, "wall_time": time.time(), "reason": reason})
            logger.warning("arm %s unreachable: %s", self.arm.label, reason)

    def start(self):
        for name, ch in self.chans.items():
            self.client.subscribe(ch, self._callback(name, self.arm.published(name)))

    def _callback(self, name, published):
        arrivals = self.arrivals[name]
        values = self.values[name]
        archiver = self.archiver
        client = self.client

        def cb(v):
            if not self.active:
                return
            # receive time of the chunk, so decoding and archiving earlier
            # events of the same burst do not shift later arrivals
            arrivals.append(client.last_rx)
            values.append(v)
            if archiver is not None:
                archiver.append(sample_from_wire(published, v))
        return cb

    def stop(self):
        self.active = False
        self.client.close()

    def intervals(self, periodic: dict[str, float]) -> dict[str, list[float]]:
        """Inter-arrival intervals per periodic PV, skipping the initial
        snapshot each subscription delivers."""
        out = {}
        for name, period in periodic.items():
            ts = self.arrivals.get(name, [])[1:]
            out[name] = [b - a for a, b in zip(ts, ts[1:])]
        return out


def valid_values(values):
    return [v.value for v in values if v.status != Condition.COMM]


def sequences_agree(a, b, max_shift: int = 300) -> bool:
    """True when ``a`` and ``b`` are overlapping windows of one sequence,
    i.e. some shift makes every overlapping element equal."""
    if not a or not b:
        return True
    A = np.asarray(a, dtype=float)
    B = np.asarray(b, dtype=float)
    for d in range(-min(max_shift, len(B) - 1), min(max_shift, len(A) - 1) + 1):
        # element A[i] aligns with B[i - d]
        lo = max(0, d)
        hi = min(len(A), len(B) + d)
        if hi - lo < min(len(A), len(B)) - max_shift:
            continue
        if np.array_equal(A[lo:hi], B[lo - d:hi - d]):
            return True
    return False


# -- scenarios --------------------------------------------------------------

@dataclass
class IntegrityReport:
    monitored: int
    archived: int
    missing: int
    duplicates: int
    gaps: dict[str, int]
    flush_intervals: list[float]
    accounting_checks: int
    accounting_violations: int
    torn_segments: int
    unflushed_tail: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def exactly_once(self) -> bool:
        return self.missing == 0 and self.duplicates == 0

    @property
    def total_gaps(self) -> int:
        return sum(self.gaps.values())


def _sample_key(pv, v):
    return (pv, v.seconds, v.nanoseconds, v.value, v.status, v.severity)


def integrity_check(monitors, archiver: Archiver, periodic: dict[str, float], checks=(0, 0), tail=0,
                    factor: float = 2.0) -> IntegrityReport:
    monitored = Multiset()
    for mon in monitors:
        for name, vals in mon.values.items():
            pv = mon.arm.published(name)
            monitored.update(_sample_key(pv, v) for v in vals)
    archived = Multiset()
    gaps = {}
    for pv in archiver.pvs():
        samples = archiver.query_all(pv)
        archived.update((pv, s.value.timestamp.seconds, s.value.timestamp.nanoseconds, s.value.value,
                         int(s.value.condition), int(s.value.severity)) for s in samples)
    for mon in monitors:
        for name, period in periodic.items():
            pv = mon.arm.published(name)
            samples = archiver.query_all(pv)
            if len(samples) >= 2:
                gaps[pv] = len(gap_scan(samples, period, factor))
    missing = sum((monitored - archived).values())
    dups = sum((archived - monitored).values())
    torn = len(list(archiver.dir.glob("*.tmp")))
    return IntegrityReport(sum(monitored.values()), sum(archived.values()), missing, dups, gaps,
                           archiver.flush_intervals(), checks[0], checks[1], torn, tail)


@contextlib.contextmanager
def quiet_measurement(switch_interval: float = 0.0005):
    """Keep the measuring process from adding pauses of its own: cyclic GC
    is suspended (stored samples hold no cycles) and the GIL switch interval
    is shortened so the flusher thread cannot hold off the event loop."""
    was_enabled = gc.isenabled()
    old = sys.getswitchinterval()
    gc.collect()
    gc.freeze()
    gc.disable()
    sys.setswitchinterval(switch_interval)
    try:
        yield
    finally:
        sys.setswitchinterval(old)
        gc.unfreeze()
        if was_enabled:
            gc.enable()


async def _accounting_watch(archiver: Archiver, stop: asyncio.Event, period: float = 0.25):
    checks = violations = 0
    while not stop.is_set():
        checks += 1
        if not archiver.accounting().balanced:
            violations += 1
        try:
            await asyncio.wait_for(stop.wait(), period)
        except asyncio.TimeoutError:
            pass
    return checks, violations


@dataclass
class ReliabilityResult:
    reports: dict[str, JitterReport]
    expected_counts_ok: dict[str, float]
    sequence_mismatches: dict[str, list[str]]
    unreachable: list[dict]
    integrity: IntegrityReport | None
    archive_dir: Path | None

    @property
    def p99_ratio(self) -> float:
        a, b = (r.p99_abs for r in self.reports.values())
        lo, hi = sorted((a, b))
        return hi / lo if lo > 0 else (1.0 if hi == 0 else float("inf"))


async def run_reliability(cfg: ScenarioConfig, arms: dict[str, Arm], variables, *, archive: bool = True,
                          stop_arm_after: dict[str, float] | None = None) -> ReliabilityResult:
    """Monitor every PV on both arms for ``cfg.duration_s``; jitter reports,
    cross-arm value comparison and (optionally) archive integrity."""
    names = [v.name for v in variables]
    nominal = {n: p for n, p in nominal_periods(variables).items() if p is not None}
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    archiver = Archiver(out / "archive") if archive else None
    chans = {}
    clients = {}
    for label, arm in arms.items():
        clients[label], chans[label] = await connect_arm(arm, names, cfg)
    labels = list(arms)
    if len(labels) == 2:
        try:
            check_surfaces(chans[labels[0]], chans[labels[1]])
        except DatabaseMismatch:
            for c in clients.values():
                c.close()
            raise
    monitors = {label: ArmMonitor(arms[label], clients[label], chans[label], archiver) for label in labels}
    stop = asyncio.Event()
    watch = None
    if archiver is not None:
        archiver.start()
        watch = asyncio.ensure_future(_accounting_watch(archiver, stop))
    with quiet_measurement():
        for mon in monitors.values():
            mon.start()
        t_start = time.monotonic()
        stoppers = []
        for label, after in (stop_arm_after or {}).items():
            async def _stop(arm=arms[label], after=after):
                await asyncio.sleep(after)
                logger.warning("stopping arm %s (failure injection)", arm.label)
                await arm.stop()
            stoppers.append(asyncio.ensure_future(_stop()))
        await asyncio.sleep(cfg.duration_s)
        elapsed = time.monotonic() - t_start
        for mon in monitors.values():
            mon.stop()
    for s in stoppers:
        await s
    checks = (0, 0)
    if archiver is not None:
        stop.set()
        checks = await watch
        await asyncio.to_thread(archiver.stop)

    reports = {label: JitterReport.build(label, nominal, mon.intervals(nominal), cfg.tolerance_s)
               for label, mon in monitors.items()}
    counts_ok = {}
    for label, mon in monitors.items():
        ok = 0
        for n, p in nominal.items():
            got = len(mon.arrivals[n]) - 1
            if abs(got - elapsed / p) <= 1.0 + 1e-9:
                ok += 1
        counts_ok[label] = ok / len(nominal) if nominal else 1.0
    mismatches = {}
    if len(labels) == 2:
        a, b = monitors[labels[0]], monitors[labels[1]]
        mismatches = {f"{labels[0]}~{labels[1]}": [
            n for n in names if not sequences_agree(valid_values(a.values[n]), valid_values(b.values[n]))]}
    integrity = None
    if archiver is not None:
        integrity = integrity_check(monitors.values(), archiver, nominal, checks)
    unreachable = [u for m in monitors.values() for u in m.unreachable]
    result = ReliabilityResult(reports, counts_ok, mismatches, unreachable, integrity,
                               archiver.dir if archiver else None)
    write_reliability_report(cfg, result)
    return result


def write_reliability_report(cfg: ScenarioConfig, res: ReliabilityResult):
    out = cfg.out
    rows = []
    for label, rep in res.reports.items():
        for pv, ivs in rep.intervals.items():
            rows.extend((pv, label, rep.nominal[pv], f"{x:.9f}") for x in ivs)
    write_csv(out / "intervals.csv", ["pv", "arm", "nominal_s", "interval_s"], rows)
    stat_rows = []
    for label, rep in res.reports.items():
        iv, nom = rep.flat()
        if rep.stats is not None:
            s = rep.stats
            stat_rows.append((label, s.count, s.mean, s.stddev, s.min, s.max, s.p50, s.p99,
                              rep.p99_abs, rep.within_fraction))
            write_csv(out / f"histogram_{label}.csv", ["bin_low_ms", "bin_high_ms", "count"],
                      histogram_rows(iv - nom))
    write_csv(out / "stats.csv", ["arm", "count", "mean_s", "stddev_s", "min_s", "max_s", "p50_s", "p99_s",
                                  "p99_abs_s", "within_tolerance_fraction"], stat_rows)
    summary = {
        "scenario": "reliability",
        "notes": [PV_COUNT_NOTE, TIMESTAMP_NOTE,
                  "jitter measured as monitor arrival intervals at the bench client"],
        "config": _cfg_dict(cfg),
        "expected_count_fraction": res.expected_counts_ok,
        "sequence_mismatches": res.sequence_mismatches,
        "arm_unreachable": res.unreachable,
        "p99_abs_ratio": res.p99_ratio if len(res.reports) == 2 else None,
        "integrity": dataclasses.asdict(res.integrity) if res.integrity else None,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, default=str))
    if res.integrity:
        write_csv(out / "flush_intervals.csv", ["interval_s"], [(x,) for x in res.integrity.flush_intervals])


def _cfg_dict(cfg):
    return {k: (str(v) if isinstance(v, Path) else v) for k, v in dataclasses.asdict(cfg).items()}


async def run_archive_integrity(cfg: ScenarioConfig, arm: Arm, variables, *,
                                crash_after_s: float | None = None) -> IntegrityReport:
    """Monitor and archive one arm. With ``crash_after_s`` the archiver is
    killed between flushes (buffer abandoned, no final flush)."""
    names = [v.name for v in variables]
    nominal = {n: p for n, p in nominal_periods(variables).items() if p is not None}
    cfg.out.mkdir(parents=True, exist_ok=True)
    archiver = Archiver(cfg.out / "archive")
    if not names:
        report = integrity_check([], archiver, {})
        (cfg.out / "archive_integrity.json").write_text(json.dumps(dataclasses.asdict(report), indent=2))
        return report
    client, chans = await connect_arm(arm, names, cfg)
    mon = ArmMonitor(arm, client, chans, archiver)
    stop = asyncio.Event()
    archiver.start()
    watch = asyncio.ensure_future(_accounting_watch(archiver, stop))
    mon.start()
    tail = 0
    if crash_after_s is not None:
        await asyncio.sleep(crash_after_s)
        # kill: no more appends, no final flush
        mon.archiver = None
        mon.active = False
        stop.set()
        checks = await watch
        await asyncio.to_thread(archiver.stop, False)
        tail = archiver.accounting().buffered
        crashed_count = archiver.appended
        mon.stop()
        # only samples handed to the archiver before the crash count as monitored
        _truncate_to(mon, crashed_count)
        reopened = Archiver(cfg.out / "archive")
        report = integrity_check([mon], reopened, nominal, checks, tail)
    else:
        await asyncio.sleep(cfg.duration_s)
        mon.stop()
        stop.set()
        checks = await watch
        await asyncio.to_thread(archiver.stop)
        report = integrity_check([mon], archiver, nominal, checks)
    report.notes.append("one global batch per flush")
    (cfg.out / "archive_integrity.json").write_text(json.dumps(dataclasses.asdict(report), indent=2, default=str))
    write_csv(cfg.out / "flush_intervals.csv", ["interval_s"], [(x,) for x in report.flush_intervals])
    return report


def _truncate_to(mon: ArmMonitor, count: int):
    """Keep only the first ``count`` samples in global arrival order."""
    order = sorted(((t, name, i) for name, ts in mon.arrivals.items() for i, t in enumerate(ts)))[:count]
    keep = {}
    for _, name, i in order:
        keep.setdefault(name, set()).add(i)
    for name in mon.values:
        idx = keep.get(name, set())
        mon.values[name] = [v for i, v in enumerate(mon.values[name]) if i in idx]


@dataclass
class BatchedGetReport:
    batch_size: int
    trials: int
    passed: int
    latencies_s: list[float]
    failures: list[dict]


async def batched_get_once(client, chans: list) -> tuple[list, float]:
    t0 = time.perf_counter()
    entries = await client.read_multi(chans)
    latency = time.perf_counter() - t0
    failed = [(sid, Status(st).name if st in Status._value2member_map_ else st)
              for sid, st, _ in entries if st != 0]
    if failed:
        raise PartialResponse(failed)
    return entries, latency


async def run_batched_get(cfg: ScenarioConfig, arm: Arm, names, *, extra_sids=()) -> BatchedGetReport:
    """``cfg.trials`` READ_MULTI round trips of ``cfg.batch_size`` PVs, each
    cross-checked against individual READs (same timestamp ⇒ same value;
    newer READ ⇒ the batched value must appear in the monitor history)."""
    names = list(names)[: cfg.batch_size]
    if len(names) < cfg.batch_size:
        raise BenchError(f"arm serves only {len(names)} PVs, batch needs {cfg.batch_size}")
    client, chans = await connect_arm(arm, names, cfg)
    mclient, mchans = await connect_arm(arm, names, cfg)
    history: dict[str, dict[tuple, float]] = {n: {} for n in names}
    for n in names:
        mclient.subscribe(mchans[n], lambda v, h=history[n]: h.__setitem__((v.seconds, v.nanoseconds), v.value))
    await asyncio.sleep(0.2)
    by_sid = {chans[n].sid: n for n in names}
    batch = [chans[n] for n in names] + list(extra_sids)
    latencies, failures = [], []
    passed = 0
    for trial in range(cfg.trials):
        try:
            entries, latency = await batched_get_once(client, batch)
        except PartialResponse as exc:
            failures.append({"trial": trial, "failed": exc.failed})
            continue
        latencies.append(latency)
        singles = await asyncio.gather(*(client.read(chans[n]) for n in names))
        bad = []
        for (sid, _, v), r in zip(entries, singles):
            name = by_sid[sid]
            tv, tr = (v.seconds, v.nanoseconds), (r.seconds, r.nanoseconds)
            if tv == tr:
                if (v.value, v.status, v.severity) != (r.value, r.status, r.severity):
                    bad.append(name)
            elif tr > tv:
                for _ in range(100):
                    if tv in history[name]:
                        break
                    await asyncio.sleep(0.01)
                if history[name].get(tv) != v.value:
                    bad.append(name)
            else:
                bad.append(name)
        if bad or len(entries) != len(names):
            failures.append({"trial": trial, "mismatched": bad})
        else:
            passed += 1
    client.close()
    mclient.close()
    report = BatchedGetReport(cfg.batch_size, cfg.trials, passed, latencies, failures)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "batched_get.csv", ["trial", "latency_s"], list(enumerate(latencies)))
    (cfg.out / "batched_get.json").write_text(json.dumps(dataclasses.asdict(report), indent=2, default=str))
    return report


@dataclass
class ScaleReport:
    record_count: int
    init_wall_s: dict[str, float]
    init_reported_s: dict[str, float]
    reads_ok: dict[str, int]
    reads_total: int
    gateway_slower: bool


async def run_scale(cfg: ScenarioConfig, workdir: Path | None = None) -> ScaleReport:
    """Deploy both arms with constant-valued records so every random read has
    an exact expected value."""
    cfg = dataclasses.replace(cfg, constant_sources=True)
    variables = build_pvlist(cfg)
    expected = {v.name: v.source.v for v in variables}
    workdir = workdir or cfg.out / "scale"
    arms = await spawn_arms(cfg, variables, workdir)
    rng = random.Random(cfg.seed)
    picks = rng.sample([v.name for v in variables], min(cfg.random_reads, len(variables)))
    reads_ok = {}
    try:
        for label, arm in arms.items():
            client, chans = await connect_arm(arm, picks, cfg)
            ok = 0
            for n in picks:
                v = await client.read(chans[n])
                if (v.dtype.is_time and v.value == expected[n] and v.status == Condition.NO_ALARM
                        and v.seconds > 0):
                    ok += 1
            client.close()
            reads_ok[label] = ok
    finally:
        for arm in arms.values():
            await arm.stop()
    wall = {k: a.init_wall_s for k, a in arms.items()}
    reported = {k: a.init_reported_s for k, a in arms.items()}
    report = ScaleReport(cfg.record_count, wall, reported, reads_ok, len(picks),
                         wall["gateway"] >= wall["refioc"])
    if not report.gateway_slower:
        logger.info("gateway arm initialised faster than the reference IOC (informational)")
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "scale.csv", ["arm", "records", "init_wall_s", "init_reported_s", "reads_ok", "reads"],
              [(k, cfg.record_count, wall[k], reported[k], reads_ok.get(k), len(picks)) for k in arms])
    return report


@dataclass
class StormResult:
    monitors: int
    lost: int
    duplicates: int
    reordered: int
    stalled: int
    updates: int

    @property
    def ok(self) -> bool:
        return self.lost == self.duplicates == self.reordered == self.stalled == 0


def check_sequence(values) -> tuple[int, int, int]:
    """(lost, duplicates, reordered) for a stream of counter values that
    should increase by exactly one per update."""
    lost = dups = reordered = 0
    prev = None
    for v in values:
        if prev is not None:
            if v == prev:
                dups += 1
            elif v < prev:
                reordered += 1
            elif v > prev + 1:
                lost += int(round(v - prev - 1))
        if prev is None or v > prev:
            prev = v
    return lost, dups, reordered


async def storm_once(cfg: ScenarioConfig, arm: Arm, m: int, duration_s: float) -> StormResult:
    clients = []
    streams = []
    try:
        for _ in range(m):
            client, chans = await connect_arm(arm, [SEQ_PV], cfg)
            stream: list[float] = []
            client.subscribe(chans[SEQ_PV], lambda v, s=stream: s.append(v.value))
            clients.append(client)
            streams.append(stream)
        await asyncio.sleep(duration_s)
    finally:
        for c in clients:
            c.close()
    lost = dups = reord = stalled = 0
    expected_min = duration_s / cfg.counter_period_s * 0.5
    for s in streams:
        a, b, c = check_sequence(s)
        lost, dups, reord = lost + a, dups + b, reord + c
        if len(s) < expected_min:
            stalled += 1
    return StormResult(m, lost, dups, reord, stalled, sum(len(s) for s in streams))


async def run_monitor_storm(cfg: ScenarioConfig, arm: Arm, sweep=None) -> tuple[list[StormResult], int | None]:
    """Sweep the number of concurrent subscriptions; returns the results and
    the first count at which failures appeared (None if none did)."""
    sweep = tuple(sweep or cfg.monitor_sweep)
    results = []
    first_fail = None
    for m in sweep:
        res = await storm_once(cfg, arm, m, cfg.storm_duration_s)
        results.append(res)
        logger.info("storm M=%d: %s", m, res)
        if not res.ok and first_fail is None:
            first_fail = m
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_csv(cfg.out / "monitor_storm.csv",
              ["monitors", "updates", "lost", "duplicates", "reordered", "stalled", "ok"],
              [(r.monitors, r.updates, r.lost, r.duplicates, r.reordered, r.stalled, r.ok) for r in results])
    (cfg.out / "monitor_storm.json").write_text(json.dumps(
        {"arm": arm.label, "notes": [MONITOR_NOTE], "first_failure_at": first_fail,
         "results": [dataclasses.asdict(r) for r in results]}, indent=2))
    return results, first_fail


# -- CLI driver -------------------------------------------------------------

async def run_scenario(cfg: ScenarioConfig, gateway: str | None = None, refioc: str | None = None,
                       pvlist: str | None = None) -> dict:
    """Run one scenario, spawning the arms unless addresses are given."""
    from .upstream import load_pvlist

    if cfg.scenario == "scale":
        rep = await run_scale(cfg)
        return dataclasses.asdict(rep)
    with_counter = cfg.scenario == "monitor_storm"
    variables = load_pvlist(pvlist) if pvlist else build_pvlist(cfg, with_counter=with_counter)
    external = bool(gateway or refioc)
    if external:
        arms = external_arms(gateway, refioc)
    else:
        which = ("gateway", "refioc") if cfg.scenario == "reliability" else ("gateway",)
        drops = {"gateway": cfg.drop_event_at} if cfg.drop_event_at else None
        arms = await spawn_arms(cfg, variables, cfg.out / "arms", which=which, drop_event_at=drops)
    try:
        if cfg.scenario == "reliability":
            res = await run_reliability(cfg, arms, variables)
            return {label: dataclasses.asdict(r.stats) if r.stats else None for label, r in res.reports.items()} | {
                "p99_abs_ratio": res.p99_ratio if len(res.reports) == 2 else None}
        arm = arms.get("gateway") or next(iter(arms.values()))
        if cfg.scenario == "batched_get":
            rep = await run_batched_get(cfg, arm, [v.name for v in variables])
            return {"passed": rep.passed, "trials": rep.trials}
        if cfg.scenario == "monitor_storm":
            results, first_fail = await run_monitor_storm(cfg, arm)
            return {"first_failure_at": first_fail, "results": [dataclasses.asdict(r) for r in results]}
        rep = await run_archive_integrity(cfg, arm, variables)
        return {"exactly_once": rep.exactly_once, "missing": rep.missing, "duplicates": rep.duplicates,
                "gaps": rep.total_gaps}
    finally:
        if not external:
            for arm in arms.values():
                await arm.stop()
