"""Worst-case experiments on the gateway arm: batched reads, record count
scaling and concurrent subscriptions.

    python scripts/run_worst_case.py batched --batch 180 --trials 100
    python scripts/run_worst_case.py scale --records 16000
    python scripts/run_worst_case.py storm --sweep 10 40 80 120 200 --seconds 60
"""
import argparse
import asyncio
import logging
import statistics
from pathlib import Path

from pvbridge import bench


async def batched(args):
    cfg = bench.ScenarioConfig(scenario="batched_get", record_count=max(args.records, args.batch),
                               batch_size=args.batch, trials=args.trials, out=args.out)
    variables = bench.build_pvlist(cfg)
    arms = await bench.spawn_arms(cfg, variables, cfg.out / "arms", which=("gateway",))
    try:
        rep = await bench.run_batched_get(cfg, arms["gateway"], [v.name for v in variables])
    finally:
        await arms["gateway"].stop()
    lat = rep.latencies_s
    print(f"{rep.passed}/{rep.trials} trials correct, batch {rep.batch_size}")
    if lat:
        print(f"round trip median {statistics.median(lat) * 1e3:.2f} ms, max {max(lat) * 1e3:.2f} ms")


async def scale(args):
    cfg = bench.ScenarioConfig(scenario="scale", record_count=args.records, random_reads=args.reads, out=args.out)
    rep = await bench.run_scale(cfg)
    for arm in rep.init_wall_s:
        print(f"{arm}: init {rep.init_wall_s[arm]:.2f} s (reported {rep.init_reported_s[arm]:.2f} s), "
              f"reads {rep.reads_ok[arm]}/{rep.reads_total}")
    print("gateway slower:", rep.gateway_slower)


async def storm(args):
    cfg = bench.ScenarioConfig(scenario="monitor_storm", record_count=args.records, storm_duration_s=args.seconds,
                               monitor_sweep=tuple(args.sweep), out=args.out)
    variables = bench.build_pvlist(cfg, with_counter=True)
    drops = {"gateway": args.drop_event_at} if args.drop_event_at else None
    arms = await bench.spawn_arms(cfg, variables, cfg.out / "arms", which=("gateway",), drop_event_at=drops)
    try:
        results, first_fail = await bench.run_monitor_storm(cfg, arms["gateway"])
    finally:
        await arms["gateway"].stop()
    for r in results:
        print(f"M={r.monitors:4d}: updates {r.updates}, lost {r.lost}, dup {r.duplicates}, "
              f"reordered {r.reordered}, stalled {r.stalled} -> {'ok' if r.ok else 'FAIL'}")
    print("first failure at:", first_fail)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", type=Path, default=Path("bench-out/worst_case"))
    p.add_argument("--records", type=int, default=196)
    sub = p.add_subparsers(dest="cmd", required=True)
    b = sub.add_parser("batched")
    b.add_argument("--batch", type=int, default=180)
    b.add_argument("--trials", type=int, default=100)
    s = sub.add_parser("scale")
    s.add_argument("--reads", type=int, default=100)
    m = sub.add_parser("storm")
    m.add_argument("--sweep", type=int, nargs="+", default=[10, 40, 80, 120, 200])
    m.add_argument("--seconds", type=float, default=60.0)
    m.add_argument("--drop-event-at", type=int, default=None)
    args = p.parse_args()
    if args.cmd == "scale" and args.records == 196:
        args.records = 16000
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    asyncio.run({"batched": batched, "scale": scale, "storm": storm}[args.cmd](args))
