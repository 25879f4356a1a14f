"""Recompute the jitter statistics from a raw intervals.csv.

    python scripts/jitter_summary.py bench-out/reliability/intervals.csv
"""
import argparse
import csv
from collections import defaultdict

import numpy as np

from pvbridge.bench import jitter_stats, nearest_rank


def main(path, tolerance):
    iv, nom = defaultdict(list), defaultdict(list)
    with open(path) as fh:
        for row in csv.DictReader(fh):
            iv[row["arm"]].append(float(row["interval_s"]))
            nom[row["arm"]].append(float(row["nominal_s"]))
    p99 = {}
    for arm in iv:
        s = jitter_stats(iv[arm], nom[arm])
        absj = np.sort(np.abs(np.asarray(iv[arm]) - np.asarray(nom[arm])))
        p99[arm] = nearest_rank(absj, 99)
        within = float(np.mean(absj <= tolerance))
        print(f"{arm:8s} n={s.count} mean={s.mean * 1e3:+.3f}ms sd={s.stddev * 1e3:.3f}ms "
              f"min={s.min * 1e3:+.2f}ms max={s.max * 1e3:+.2f}ms p50={s.p50 * 1e3:+.3f}ms p99={s.p99 * 1e3:+.3f}ms "
              f"p99|j|={p99[arm] * 1e3:.3f}ms within={within * 100:.3f}%")
    if len(p99) == 2:
        a, b = sorted(p99.values())
        print(f"p99 |jitter| ratio {b / a:.2f}" if a > 0 else "p99 |jitter| ratio undefined")


if __name__ == "__main__":
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("intervals_csv")
    p.add_argument("--tolerance", type=float, default=0.1)
    args = p.parse_args()
    main(args.intervals_csv, args.tolerance)
