"""Archive integrity on the gateway arm, optionally killing the archiver
between flushes.

    python scripts/run_archive_integrity.py --duration 600
    python scripts/run_archive_integrity.py --crash-after 25
"""
import argparse
import asyncio
import logging
from pathlib import Path

from pvbridge import bench


async def main(args):
    cfg = bench.ScenarioConfig(scenario="archive_integrity", record_count=args.records, duration_s=args.duration,
                               out=args.out)
    variables = bench.build_pvlist(cfg)
    arms = await bench.spawn_arms(cfg, variables, cfg.out / "arms", which=("gateway",))
    try:
        rep = await bench.run_archive_integrity(cfg, arms["gateway"], variables, crash_after_s=args.crash_after)
    finally:
        await arms["gateway"].stop()
    print(f"monitored {rep.monitored}, archived {rep.archived}, missing {rep.missing}, duplicates {rep.duplicates}")
    print(f"unflushed tail {rep.unflushed_tail}, torn segments {rep.torn_segments}")
    print(f"gaps (k=2) {rep.total_gaps} over {len(rep.gaps)} PVs")
    print(f"accounting violations {rep.accounting_violations}/{rep.accounting_checks}")
    if rep.flush_intervals:
        print(f"flush intervals {min(rep.flush_intervals):.3f}..{max(rep.flush_intervals):.3f} s "
              f"({len(rep.flush_intervals)})")
    print("exactly once:", rep.exactly_once)


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--records", type=int, default=196)
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--crash-after", type=float, default=None)
    p.add_argument("--out", type=Path, default=Path("bench-out/archive_integrity"))
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    asyncio.run(main(args))
