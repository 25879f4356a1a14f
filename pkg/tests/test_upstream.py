import asyncio
import math

import pytest
from hypothesis import given, settings, strategies as st

from pvbridge import netio
from pvbridge.pvcore import AlarmLimits, Event, Periodic
from pvbridge.upstream import (FSM_EVENTS, Constant, Counter, DuplicateName, FsmCommand, FsmState, Noise,
                               PlantParam, PlantState, PvListError, ReservedPrefix, ScanDriver, SharedVariable,
                               SimConfig, Simulation, Sine, Toggle, deploy_upstream, format_pvlist_line, fsm_step,
                               offline_sequences, parse_pvlist, parse_pvlist_line, plant_step, sample_source, scan_phases)
from pvbridge.wire import DType, Status

from .util import run, wait_for_condition

# frozen from numpy's generator for (base_seed 0, seed 42)
NOISE_42 = [-0.5810829879150892, 1.0025613669775362, 0.038704423083064]
# independent pure-Python Euler loop, kp=2 ki=1 tau=1 k=1 sp=1 dt=0.01
PLANT_X_10000 = 0.9999999999999944

FSM_TABLE = {
    (FsmState.IDLE, "start"): FsmState.RUNNING,
    (FsmState.RUNNING, "stop"): FsmState.IDLE,
    (FsmState.IDLE, "fault"): FsmState.FAULT,
    (FsmState.RUNNING, "fault"): FsmState.FAULT,
    (FsmState.FAULT, "fault"): FsmState.FAULT,
    (FsmState.FAULT, "reset"): FsmState.IDLE,
}


# plant

def test_forced_input_euler_step():
    s = plant_step(PlantState(x=0.0, u=1.0, kp=0, ki=0, manual=True), 0.1)
    assert s.x == pytest.approx(0.1)


def test_equilibrium_is_kept():
    s0 = PlantState(x=1.0, setpoint=1.0, integrator=1.0)
    s1 = plant_step(s0, 0.01)
    assert abs(s1.x - 1.0) < 1e-12


def test_closed_loop_converges():
    s = PlantState()
    for _ in range(10_000):
        s = plant_step(s, 0.01)
    assert s.x == pytest.approx(PLANT_X_10000, abs=1e-12)
    assert abs(s.x - 1.0) < 0.01


def test_plant_step_bounds():
    with pytest.raises(ValueError):
        plant_step(PlantState(), 0.0)
    with pytest.raises(ValueError):
        plant_step(PlantState(tau_s=0.5), 0.5)
    with pytest.raises(ValueError):
        PlantState(tau_s=0)


# state machine

def test_fsm_exhaustive():
    for state in FsmState:
        for ev in FSM_EVENTS:
            assert fsm_step(state, ev) is FSM_TABLE.get((state, ev), state), (state, ev)


def test_fault_only_exits_by_reset():
    assert fsm_step(FsmState.FAULT, "start") is FsmState.FAULT
    assert fsm_step(FsmState.FAULT, "stop") is FsmState.FAULT


# sources

def test_sine_quarter_period():
    assert sample_source(Sine(1, 1, 0, 0), 0.25) == pytest.approx(1.0)


def test_toggle():
    assert sample_source(Toggle(1.0), 1.5) == 1
    assert sample_source(Toggle(1.0), 0.5) == 0


def test_noise_reproducible():
    first = [sample_source(Noise(0, 1, 42), 0.0, i) for i in range(3)]
    again = [sample_source(Noise(0, 1, 42), 9.0, i) for i in range(3)]
    assert first == again == NOISE_42


def test_constant_and_counter():
    assert sample_source(Constant(3.5), 7.0) == 3.5
    assert [sample_source(Counter(), 0.0, i) for i in range(3)] == [1.0, 2.0, 3.0]


def test_source_invariants():
    with pytest.raises(ValueError):
        Sine(1, 0, 0, 0)
    with pytest.raises(ValueError):
        Noise(0, -1, 1)
    with pytest.raises(ValueError):
        sample_source(Constant(1.0), -1.0)


# PV lists

def test_parse_line():
    v = parse_pvlist_line("Temp1,Double,input,periodic:1,sine:1,0.2,0,5")
    assert v == SharedVariable("Temp1", "Double", "input", Periodic(1.0), Sine(1.0, 0.2, 0.0, 5.0))
    assert v.dtype == DType.PLAIN_DOUBLE


def test_parse_with_alarm_field():
    v = parse_pvlist_line("T,Double,input,event,plant,alarm:,,8,9")
    assert v.limits == AlarmLimits(None, None, 8.0, 9.0)
    assert v.scan == Event()


def test_parse_list_skips_comments():
    vs = parse_pvlist("# header\n\nA,Boolean,output,event,cmd:start  # go\nB,Double,output,periodic:5,setpoint\n")
    assert [v.name for v in vs] == ["A", "B"]
    assert vs[0].source == FsmCommand("start") and vs[1].source == PlantParam("setpoint")


@pytest.mark.parametrize("line", [
    "A,Double,input",
    "A,String,input,periodic:1,const:1",
    "A,Double,input,periodic:1,sine:1,2",
    "A,Double,input,periodic:1,wobble:1",
    "A,Boolean,input,periodic:1,sine:1,1,0,0",
    "A,Double,input,periodic:1,setpoint",
    "A,Boolean,output,event,cmd:explode",
])
def test_bad_lines(line):
    with pytest.raises(PvListError):
        parse_pvlist_line(line)


sources = st.one_of(
    st.builds(Sine, st.floats(-100, 100), st.floats(0.001, 10), st.floats(-7, 7), st.floats(-100, 100)),
    st.builds(Noise, st.floats(-10, 10), st.floats(0, 5), st.integers(0, 2**31)),
    st.builds(Constant, st.floats(-1e9, 1e9)),
    st.just(Counter()),
)


@settings(max_examples=200)
@given(st.from_regex(r"[A-Za-z][A-Za-z0-9_:]{0,30}", fullmatch=True), sources,
       st.sampled_from([Periodic(1.0), Periodic(5.0), Periodic(0.25), Event()]))
def test_line_round_trip(name, source, scan):
    var = SharedVariable(name, "Double", "input", scan, source, AlarmLimits(None, 1.0, None, 2.5))
    assert parse_pvlist_line(format_pvlist_line(var)) == var


# determinism

VARS = [
    SharedVariable("Plant", "Double", "input", Periodic(1.0), parse_pvlist_line("x,Double,input,event,plant").source),
    SharedVariable("Noise", "Double", "input", Periodic(1.0), Noise(0, 1, 3)),
    SharedVariable("Fsm", "Double", "input", Event(), parse_pvlist_line("x,Double,input,event,fsm").source),
    SharedVariable("Tog", "Boolean", "input", Periodic(5.0), Toggle(2.0)),
]


def test_offline_runs_identical():
    a = offline_sequences(VARS, SimConfig(seed=5), 120.0)
    b = offline_sequences(VARS, SimConfig(seed=5), 120.0)
    assert a == b
    # 1 s scans at 0, 1, ..., 120; 5 s scans at 0 then phased to 0.5, 5.5, ..., 115.5
    assert len(a["Plant"]) == 121 and len(a["Tog"]) == 25
    # initial Idle, then per 40 s cycle: start, x rises through 0.5, stop, x falls through 0.5
    assert a["Fsm"] == [0.0] + [1.0, 1.0, 0.0, 0.0] * 3
    # Toggle(2) is floor(t/2) mod 2 at t = 0, 0.5, 5.5, 10.5, 15.5, 20.5
    assert a["Tog"][:6] == [0, 0, 0, 1, 1, 0]


def test_scan_phases_separate_periods():
    assert scan_phases([1.0, 5.0, 1.0]) == {1.0: 0.0, 5.0: 0.5}
    assert scan_phases([0.1, 1.0, 5.0]) == pytest.approx({0.1: 0.0, 1.0: 0.1 / 3, 5.0: 0.2 / 3})
    assert scan_phases([]) == {}


def test_different_periods_never_due_together():
    times = {}
    driver = ScanDriver(Simulation(VARS, SimConfig()), VARS, lambda var, raw: None)
    driver.start(0.0)
    for item, off in driver.engine.due(600.0):
        if isinstance(item, SharedVariable):
            times.setdefault(round(off, 9), set()).add(item.scan.period_s)
    assert all(len(periods) == 1 for periods in times.values())


def test_seed_changes_noise_only():
    a = offline_sequences(VARS, SimConfig(seed=1), 30.0)
    b = offline_sequences(VARS, SimConfig(seed=2), 30.0)
    assert a["Plant"] == b["Plant"] and a["Noise"] != b["Noise"]


def test_write_to_setpoint_reaches_plant():
    sim = Simulation([SharedVariable("SP", "Double", "output", Periodic(1.0), PlantParam("setpoint"))])
    sim.write("SP", 2.5)
    assert sim.plant.setpoint == 2.5


# server

def test_deploy_rejects_reserved_prefix_and_duplicates():
    v = SharedVariable("NIOC:X", "Double", "input", Periodic(1.0), Constant(1.0))
    with pytest.raises(ReservedPrefix):
        run(deploy_upstream([v]))
    w = SharedVariable("X", "Double", "input", Periodic(1.0), Constant(1.0))
    with pytest.raises(DuplicateName):
        run(deploy_upstream([w, w]))


def test_serves_plain_values_only():
    async def body():
        temp = SharedVariable("Temp1", "Double", "input", Periodic(1.0), Sine(1, 0.2, 0, 5))
        sw = SharedVariable("Sw", "Boolean", "output", Event(), Constant(0.0))
        srv = await deploy_upstream([temp, sw])
        assert srv.deploy_time_s is not None
        c = await netio.PVClient.connect(*srv.address)
        ch = await c.create_channel("Temp1")
        assert ch.dtype == DType.PLAIN_DOUBLE and not ch.writable
        v = await c.read(ch)
        assert v.dtype == DType.PLAIN_DOUBLE and v.value == pytest.approx(5.0, abs=1.0)
        sch = await c.create_channel("Sw")
        assert sch.dtype == DType.PLAIN_ENUM and sch.writable
        assert await c.write(sch, 1) == Status.OK
        assert (await c.read(sch)).value == 1
        assert await c.write(ch, 1.0) == Status.ACCESS_DENIED
        with pytest.raises(netio.RequestFailed):
            await c.create_channel("Nope")
        with pytest.raises(netio.RequestFailed) as exc:
            await c.read_multi([ch])
        assert exc.value.status == Status.UNSUPPORTED
        c.close()
        await srv.close()
    run(body())


def test_subscription_order_no_duplicates():
    async def body():
        seq = SharedVariable("Seq", "Double", "input", Periodic(0.02), Counter())
        srv = await deploy_upstream([seq])
        clients = [await netio.PVClient.connect(*srv.address) for _ in range(3)]
        streams = []
        for c in clients:
            ch = await c.create_channel("Seq")
            s = []
            c.subscribe(ch, lambda v, s=s: s.append(v.value))
            streams.append(s)
        await wait_for_condition(lambda: all(len(s) > 40 for s in streams), 10)
        for s in streams:
            assert all(b == a + 1 for a, b in zip(s, s[1:])), s[:20]
        for c in clients:
            c.close()
        await srv.close()
    run(body())


def test_live_sequence_matches_offline():
    async def body():
        srv = await deploy_upstream(VARS, config=SimConfig(seed=5))
        c = await netio.PVClient.connect(*srv.address)
        chans = await c.create_channels(["Plant", "Noise"])
        got = {n: [] for n in chans}
        for n, ch in chans.items():
            c.subscribe(ch, lambda v, n=n: got[n].append(v.value))
        await asyncio.sleep(3.2)
        c.close()
        await srv.close()
        ref = offline_sequences(VARS, SimConfig(seed=5), 10.0)
        for n, vals in got.items():
            # first event is the snapshot of the current value
            tail = vals[1:]
            start = ref[n].index(tail[0])
            assert tail == ref[n][start:start + len(tail)]
            assert not any(math.isnan(x) for x in tail)
    run(body())
