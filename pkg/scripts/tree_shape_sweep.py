#!/usr/bin/env python3
"""Sweep structure growth across sluggishness values.

Simulates key insertion at several chain-budget settings, printing CSV
rows (n, avg path length, utilization, metadata bytes) plus a comparison
against the statistical height estimate log_b(n/s) + 1 and the metadata
savings of lazier splitting.

Usage: python3 scripts/tree_shape_sweep.py [--max 1000000] [--branching 128]
       [--sluggishness-set 1,2,4,8,16] [--seed 0]
"""

import argparse
import csv
import math
import sys

from triekv.stats import SWEEP_FIELDS, structure_sweep


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--max", type=int, default=1_000_000)
    ap.add_argument("--branching", type=int, default=128, choices=(64, 128, 256))
    ap.add_argument("--sluggishness-set", default="1,2,4,8,16")
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    checkpoints = []
    c = 100
    while c < args.max:
        checkpoints.append(c)
        c *= 10
    checkpoints.append(args.max)

    slugs = [int(s) for s in args.sluggishness_set.split(",")]
    writer = csv.DictWriter(sys.stdout, fieldnames=list(SWEEP_FIELDS) + ["estimate"])
    writer.writeheader()
    meta_at_max = {}
    for s in slugs:
        rows, _ = structure_sweep(args.branching, s, checkpoints, seed=args.seed)
        for r in rows:
            est = math.log(max(r["n"] / s, 1.0), args.branching) + 1
            writer.writerow({**r, "estimate": round(est, 4)})
        meta_at_max[s] = rows[-1]["metadata_bytes"]

    base = slugs[0]
    print(f"\nmetadata at n={args.max} relative to s={base}:", file=sys.stderr)
    for s in slugs:
        ratio = meta_at_max[s] / meta_at_max[base]
        print(f"  s={s:3d}: {meta_at_max[s]:>12,} bytes ({ratio:.2%})",
              file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
