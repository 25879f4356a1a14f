import json
import math
import random
import subprocess
import sys

import pytest
from hypothesis import given, settings, strategies as st

from pvbridge import bench
from pvbridge.bench import (Arm, InsufficientData, ScenarioConfig, build_pvlist, check_sequence, histogram_rows,
                            jitter_stats, load_scenario, nominal_periods, sequences_agree)
from pvbridge.gateway import generate_database, serve_gateway, strip_prefix
from pvbridge.pvcore import Periodic
from pvbridge.refioc import serve_refioc
from pvbridge.upstream import DEFAULT_PREFIX, Counter, SharedVariable, SimConfig, deploy_upstream

from .oracles import nearest_rank_oracle, population_stddev
from .util import run


# statistics

def test_constant_intervals_have_zero_jitter():
    s = jitter_stats([1.0, 1.0, 1.0], 1.0)
    assert s.count == 3
    assert (s.mean, s.stddev, s.min, s.max, s.p50, s.p99) == (0, 0, 0, 0, 0, 0)


def test_symmetric_intervals():
    s = jitter_stats([0.9, 1.1], 1.0)
    assert s.mean == pytest.approx(0.0, abs=1e-12)
    assert s.max == pytest.approx(0.1) and s.min == pytest.approx(-0.1)


def test_percentiles_match_sort_oracle():
    rng = random.Random(17)
    iv = [rng.gauss(1.0, 0.01) for _ in range(10_000)]
    s = jitter_stats(iv, 1.0)
    j = [x - 1.0 for x in iv]
    assert s.p99 == nearest_rank_oracle(j, 99)
    assert s.p50 == nearest_rank_oracle(j, 50)
    assert s.stddev == pytest.approx(population_stddev(j), rel=1e-9)


def test_too_few_intervals():
    with pytest.raises(InsufficientData):
        jitter_stats([1.0], 1.0)


def test_report_interval_count_and_recomputable_stats():
    rep = bench.JitterReport.build("gateway", {"A": 1.0, "B": 5.0}, {"A": [1.0, 1.01, 0.99], "B": [5.2, 4.8]})
    assert rep.interval_count == 5
    assert rep.within_fraction == pytest.approx(3 / 5)
    iv, nom = rep.flat()
    assert rep.stats == jitter_stats(iv, nom)


def test_histogram_bins():
    rows = histogram_rows([0.0005, 0.0004, -0.0001, 0.0021])
    assert rows == [(-1.0, 0.0, 1), (0.0, 1.0, 2), (2.0, 3.0, 1)]


# sequence checks

def test_sequence_detector_examples():
    assert check_sequence([1, 2, 3, 4]) == (0, 0, 0)
    assert check_sequence([1, 2, 4, 5]) == (1, 0, 0)
    assert check_sequence([1, 2, 2, 3]) == (0, 1, 0)
    assert check_sequence([1, 3, 2, 4]) == (1, 0, 1)


@settings(max_examples=300)
@given(st.integers(3, 300), st.data())
def test_injected_drops_always_detected(n, data):
    k = data.draw(st.integers(1, n - 2))
    # the final element is never dropped: a missing tail is indistinguishable from a shorter run
    dropped = data.draw(st.sets(st.integers(1, n - 2), min_size=1, max_size=k))
    seq = [i for i in range(n) if i not in dropped]
    assert check_sequence(seq)[0] == len(dropped)


def test_sequences_agree_on_shifted_windows():
    base = list(range(100))
    assert sequences_agree(base[5:60], base[20:90])
    assert not sequences_agree(base[5:60], [x + 0.5 for x in base[20:90]])
    assert sequences_agree([], [1.0])


# configuration

def test_fractions_must_sum_to_one():
    with pytest.raises(ValueError):
        ScenarioConfig(p1s_fraction=0.5, p5s_fraction=0.5, event_fraction=0.1)
    with pytest.raises(ValueError):
        ScenarioConfig(scenario="nope")


def test_load_scenario(tmp_path):
    p = tmp_path / "s.ini"
    p.write_text("[scenario]\nscenario = batched_get\nrecord_count = 200\nmonitor_sweep = 10, 20\n"
                 "constant_sources = yes\ndrop_event_at = none\n")
    cfg = load_scenario(p, seed=4)
    assert (cfg.scenario, cfg.record_count, cfg.monitor_sweep, cfg.constant_sources, cfg.seed) == \
        ("batched_get", 200, (10, 20), True, 4)
    assert cfg.drop_event_at is None
    p.write_text("[scenario]\nbogus = 1\n")
    with pytest.raises(ValueError):
        load_scenario(p)


def test_default_pv_list_mix():
    vs = build_pvlist(ScenarioConfig())
    periods = nominal_periods(vs)
    assert len(vs) == 196
    n1 = sum(1 for p in periods.values() if p == 1.0)
    n5 = sum(1 for p in periods.values() if p == 5.0)
    nev = sum(1 for p in periods.values() if p is None)
    assert (n1, n5, nev) == (88, 88, 20)
    assert len({v.name for v in vs}) == 196
    assert build_pvlist(ScenarioConfig()) == vs
    withc = build_pvlist(ScenarioConfig(), with_counter=True)
    assert withc[-1].name == bench.SEQ_PV and isinstance(withc[-1].source, Counter)


# in-process arms

class _Closer:
    def __init__(self, *servers):
        self.servers = servers

    async def stop(self):
        for s in self.servers:
            await s.close()


async def gateway_arm(variables, seed=0, drop_event_at=None):
    up = await deploy_upstream(variables, config=SimConfig(seed=seed))
    gw = await serve_gateway(generate_database(variables), "%s:%d" % up.address, drop_event_at=drop_event_at)
    return Arm("gateway", gw.address, DEFAULT_PREFIX, procs=[_Closer(gw, up)])


async def refioc_arm(variables, seed=0):
    ioc = await serve_refioc(strip_prefix(generate_database(variables)), config=SimConfig(seed=seed))
    return Arm("refioc", ioc.address, "", procs=[_Closer(ioc)])


def small_cfg(tmp_path, **kw):
    base = dict(record_count=20, duration_s=4.0, out=tmp_path, trials=5, batch_size=20, storm_duration_s=3.0)
    base.update(kw)
    return ScenarioConfig(**base)


def test_batched_get_full_and_degenerate(tmp_path):
    async def body():
        cfg = small_cfg(tmp_path)
        vs = build_pvlist(cfg)
        arm = await gateway_arm(vs)
        try:
            rep = await bench.run_batched_get(cfg, arm, [v.name for v in vs])
            assert rep.passed == rep.trials == 5 and len(rep.latencies_s) == 5
            one = await bench.run_batched_get(small_cfg(tmp_path, batch_size=1), arm, [v.name for v in vs])
            assert one.passed == 5
            bad = await bench.run_batched_get(cfg, arm, [v.name for v in vs], extra_sids=[999_999])
            assert bad.passed == 0 and all(len(f["failed"]) == 1 for f in bad.failures)
        finally:
            await arm.stop()
    run(body())


def test_partial_response_names_failed_sid(tmp_path):
    async def body():
        cfg = small_cfg(tmp_path)
        vs = build_pvlist(cfg)
        arm = await gateway_arm(vs)
        try:
            client, chans = await bench.connect_arm(arm, [v.name for v in vs], cfg)
            with pytest.raises(bench.PartialResponse) as exc:
                await bench.batched_get_once(client, list(chans.values()) + [424242])
            assert [sid for sid, _ in exc.value.failed] == [424242]
            entries = await client.read_multi(list(chans.values()) + [424242])
            assert sum(1 for _, status, _ in entries if status == 0) == len(vs)
            client.close()
        finally:
            await arm.stop()
    run(body())


def test_storm_clean_and_single_forced_drop(tmp_path):
    counter = [SharedVariable(bench.SEQ_PV, "Double", "input", Periodic(0.1), Counter())]

    async def body():
        cfg = small_cfg(tmp_path)
        arm = await gateway_arm(counter)
        try:
            results, first_fail = await bench.run_monitor_storm(cfg, arm, sweep=(1, 10))
            assert first_fail is None and all(r.ok for r in results)
            assert all(r.updates >= r.monitors * 20 for r in results)
        finally:
            await arm.stop()
        arm = await gateway_arm(counter, drop_event_at=50)
        try:
            res = await bench.storm_once(cfg, arm, 3, 3.0)
            assert (res.lost, res.duplicates, res.reordered) == (1, 0, 0)
        finally:
            await arm.stop()
    run(body())


def test_short_reliability_run_with_arm_stopped(tmp_path):
    async def body():
        cfg = small_cfg(tmp_path, duration_s=6.0)
        vs = build_pvlist(cfg)
        arms = {"gateway": await gateway_arm(vs), "refioc": await refioc_arm(vs)}
        try:
            res = await bench.run_reliability(cfg, arms, vs, stop_arm_after={"refioc": 3.0})
        finally:
            await arms["gateway"].stop()
        assert [u["arm"] for u in res.unreachable] == ["refioc"]
        assert res.unreachable[0]["wall_time"] > 0
        assert res.reports["gateway"].stats is not None
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["arm_unreachable"]
        header = (tmp_path / "intervals.csv").read_text().splitlines()[0]
        assert header == "pv,arm,nominal_s,interval_s"
        assert (tmp_path / "histogram_gateway.csv").read_text().startswith("bin_low_ms,bin_high_ms,count")
    run(body())


def test_reliability_arms_agree(tmp_path):
    async def body():
        cfg = small_cfg(tmp_path, duration_s=5.0)
        vs = build_pvlist(cfg)
        arms = {"gateway": await gateway_arm(vs, seed=3), "refioc": await refioc_arm(vs, seed=3)}
        try:
            res = await bench.run_reliability(cfg, arms, vs)
        finally:
            for a in arms.values():
                await a.stop()
        assert res.sequence_mismatches == {"gateway~refioc": []}
        for rep in res.reports.values():
            assert rep.within_fraction == 1.0
        assert all(v == 1.0 for v in res.expected_counts_ok.values())
        integ = res.integrity
        assert integ.exactly_once and integ.accounting_violations == 0 and integ.torn_segments == 0
        assert integ.monitored > 0
    run(body())


def test_archive_integrity_crash_between_flushes(tmp_path):
    async def body():
        cfg = small_cfg(tmp_path)
        vs = build_pvlist(cfg)
        arm = await gateway_arm(vs)
        try:
            rep = await bench.run_archive_integrity(cfg, arm, vs, crash_after_s=3.0)
        finally:
            await arm.stop()
        # 10 s cadence: the crash comes before the first flush, so everything is tail
        assert rep.unflushed_tail > 0
        assert rep.missing == rep.unflushed_tail
        assert rep.duplicates == 0 and rep.torn_segments == 0
    run(body())


def test_empty_archive_run(tmp_path):
    async def body():
        cfg = small_cfg(tmp_path, record_count=0)
        rep = await bench.run_archive_integrity(cfg, Arm("gateway", ("127.0.0.1", 1), DEFAULT_PREFIX), [])
        assert (rep.monitored, rep.archived, rep.missing, rep.total_gaps) == (0, 0, 0, 0)
        assert not list((tmp_path / "archive").glob("*.pvar"))
    run(body())


@pytest.mark.slow
def test_small_scale_deploys_quickly(tmp_path):
    rep = run(bench.run_scale(small_cfg(tmp_path, record_count=10, random_reads=100)))
    assert rep.reads_total == 10 and rep.reads_ok == {"gateway": 10, "refioc": 10}
    assert all(t < 2.0 for t in rep.init_reported_s.values())
    assert all(not math.isnan(t) for t in rep.init_wall_s.values())


def test_cli_batched_get_smoke(tmp_path):
    out = subprocess.run([sys.executable, "-m", "pvbridge", "pvbench", "run", "--scenario", "batched_get",
                          "--records", "200", "--out", str(tmp_path)], capture_output=True, text=True, timeout=120)
    assert out.returncode == 0, out.stderr[-2000:]
    assert json.loads(out.stdout) == {"passed": 100, "trials": 100}
    assert (tmp_path / "batched_get.csv").exists()
