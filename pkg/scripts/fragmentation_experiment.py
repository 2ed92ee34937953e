#!/usr/bin/env python3
"""Measure data-space fragmentation under value-churn at several scan limits.

For each scan limit, builds a fresh store, loads mixed-size values, churns
them with updates and deletes, and reports hole bytes, recycled-allocation
ratio, and disk amplification (final data tail over the tail right after
loading).  A scan limit of 0 probes the free list without bound.

Usage: python3 scripts/fragmentation_experiment.py [--items 20000]
       [--ops 100000] [--scan-limits 1,10,100,0] [--dir /tmp/fragdemo]
"""

import argparse
import csv
import shutil
import sys
import tempfile

from triekv.config import StoreConfig
from triekv.stats import collect
from triekv.store import Store
from triekv.workload import WorkloadSpec, op_stream, preload_items


def churn(scan_limit: int, base_dir: str, items: int, ops: int, seed: int):
    cfg = StoreConfig(branching=128, sluggishness=8, region_bits=20,
                      scan_limit=scan_limit)
    spec = WorkloadSpec(ops=ops, keys=items, get_pct=0, put_pct=70,
                        delete_pct=30, value_sizes="choice:128,256,1024",
                        seed=seed)
    st = Store.create(base_dir, cfg)
    try:
        for k, v in preload_items(spec):
            st.put(k, v)
        start = collect(st)
        for op in op_stream(spec):
            if op[0] == "put":
                st.put(op[1], op[2])
            elif op[0] == "delete":
                st.delete(op[1])
        end = collect(st)
    finally:
        st.close()
    assert end.conservation_holds(), "space accounting broken"
    return {
        "scan_limit": scan_limit if scan_limit else "unlimited",
        "records": end.records,
        "data_tail": end.data_tail,
        "hole_bytes": end.hole_bytes,
        "hole_count": end.hole_count,
        "recycled_ratio": round(end.recycled_ratio, 4),
        "disk_amplification": round(end.data_tail / start.data_tail, 4),
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--items", type=int, default=20_000)
    ap.add_argument("--ops", type=int, default=100_000)
    ap.add_argument("--scan-limits", default="1,10,100,0")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--dir", default=None,
                    help="scratch directory (default: a temp dir)")
    args = ap.parse_args()

    root = args.dir or tempfile.mkdtemp(prefix="triekv-frag-")
    writer = None
    try:
        for limit in (int(x) for x in args.scan_limits.split(",")):
            sub = f"{root}/scan{limit}"
            row = churn(limit, sub, args.items, args.ops, args.seed)
            if writer is None:
                writer = csv.DictWriter(sys.stdout, fieldnames=list(row))
                writer.writeheader()
            writer.writerow(row)
            sys.stdout.flush()
    finally:
        shutil.rmtree(root, ignore_errors=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
