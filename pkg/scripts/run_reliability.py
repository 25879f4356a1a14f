"""Reliability experiment: both arms, every PV monitored, jitter and archive.

    python scripts/run_reliability.py --records 196 --duration 600 --out bench-out/reliability

Writes intervals.csv, stats.csv, histogram_<arm>.csv, flush_intervals.csv
and report.json into --out, then prints the headline numbers.
"""
import argparse
import asyncio
import logging
from pathlib import Path

from pvbridge import bench


async def main(args):
    cfg = bench.ScenarioConfig(record_count=args.records, duration_s=args.duration, seed=args.seed, out=args.out)
    variables = bench.build_pvlist(cfg)
    arms = await bench.spawn_arms(cfg, variables, cfg.out / "arms")
    try:
        stop = {"refioc": args.stop_refioc_after} if args.stop_refioc_after else None
        res = await bench.run_reliability(cfg, arms, variables, archive=not args.no_archive, stop_arm_after=stop)
    finally:
        for arm in arms.values():
            await arm.stop()
    for label, rep in res.reports.items():
        s = rep.stats
        if s is None:
            print(f"{label}: not enough intervals")
            continue
        print(f"{label}: {s.count} intervals, mean {s.mean * 1e3:+.3f} ms, sd {s.stddev * 1e3:.3f} ms, "
              f"p99 |j| {rep.p99_abs * 1e3:.2f} ms, within +-{cfg.tolerance_s * 1e3:.0f} ms "
              f"{rep.within_fraction * 100:.3f}%")
    if len(res.reports) == 2:
        print(f"p99 ratio {res.p99_ratio:.2f}")
    print("expected counts:", res.expected_counts_ok)
    print("cross-arm mismatches:", res.sequence_mismatches)
    if res.unreachable:
        print("unreachable:", res.unreachable)
    if res.integrity:
        i = res.integrity
        print(f"archive: monitored {i.monitored}, archived {i.archived}, missing {i.missing}, dup {i.duplicates}, "
              f"gaps {i.total_gaps}, accounting violations {i.accounting_violations}/{i.accounting_checks}")
    print(f"reports in {cfg.out}")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--records", type=int, default=196)
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("bench-out/reliability"))
    p.add_argument("--no-archive", action="store_true")
    p.add_argument("--stop-refioc-after", type=float, default=None,
                   help="failure injection: stop the reference IOC after this many seconds")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    asyncio.run(main(args))
