"""Command-line interface: administration, benchmarks, crash testing.

Subcommands: create, populate, put, get, del, stats, bench, crashtest
(plus the internal crash-child helper the crash harness spawns).

Exit codes: 0 success, 1 test or verification failure (including missing
keys and corrupt stores), 2 usage errors (bad flags, bad config, not a
store).  CSV output goes to stdout by default or to --csv FILE.
"""

from __future__ import annotations

import argparse
import csv
import os
import random
import shutil
import subprocess
import sys
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from . import stats as statsmod
from .config import StoreConfig
from .errors import InvalidArgument, InvalidConfig, StoreError
from .store import Store
from .wal import TEAR_ENV
from .workload import (
    WorkloadSpec,
    apply_script_entry,
    crash_script,
    key_bytes,
    op_stream,
    preload_items,
    thread_ranges,
)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2

_STORE_DEFAULTS = StoreConfig()
_WL_DEFAULTS = WorkloadSpec()


# -- flag groups --------------------------------------------------------------

def _add_create_flags(p: argparse.ArgumentParser):
    d = _STORE_DEFAULTS
    p.add_argument("--branching", type=int, default=d.branching,
                   choices=(64, 128, 256))
    p.add_argument("--sluggishness", type=int, default=d.sluggishness,
                   help="max distinct digests per chain before a split")
    p.add_argument("--region-bits", type=int, default=d.region_bits)
    p.add_argument("--wal-chunk-size", type=int, default=d.wal_chunk_size)
    _add_open_flags(p, create=True)


def _add_open_flags(p: argparse.ArgumentParser, create: bool = False):
    d = _STORE_DEFAULTS
    p.add_argument("--memory-budget", type=int,
                   default=d.memory_budget if create else None,
                   help="region cache size, in regions")
    p.add_argument("--scan-limit", type=int,
                   default=d.scan_limit if create else None,
                   help="free-space probes per allocation; 0 = unlimited")
    p.add_argument("--sync", choices=("os", "fsync"),
                   default=d.sync if create else None)


def _add_workload_flags(p: argparse.ArgumentParser, ops: bool = True):
    d = _WL_DEFAULTS
    if ops:
        p.add_argument("--ops", type=int, default=d.ops)
        p.add_argument("--get-pct", type=int, default=d.get_pct)
        p.add_argument("--put-pct", type=int, default=d.put_pct)
        p.add_argument("--delete-pct", type=int, default=d.delete_pct)
        p.add_argument("--distribution", choices=("uniform", "zipfian"),
                       default=d.distribution)
        p.add_argument("--zipf-exponent", type=float, default=d.zipf_exponent)
        p.add_argument("--threads", type=int, default=d.threads)
        p.add_argument("--partition", action="store_true",
                       help="give each thread a disjoint key range")
    p.add_argument("--keys", type=int, default=d.keys)
    p.add_argument("--key-size", type=int, default=d.key_size)
    p.add_argument("--value-sizes", default=d.value_sizes,
                   help='"fixed:N", "choice:a,b,c", or "zipf:lo,hi"')
    p.add_argument("--seed", type=int, default=d.seed)


def _spec_from(args, ops: bool = True) -> WorkloadSpec:
    kw = dict(keys=args.keys, key_size=args.key_size,
              value_sizes=args.value_sizes, seed=args.seed)
    if ops:
        kw.update(ops=args.ops, get_pct=args.get_pct, put_pct=args.put_pct,
                  delete_pct=args.delete_pct, distribution=args.distribution,
                  zipf_exponent=args.zipf_exponent, threads=args.threads,
                  partition=args.partition)
    spec = WorkloadSpec(**kw)
    spec.validate()
    return spec


def _open(args) -> Store:
    return Store.open(args.dir, memory_budget=args.memory_budget,
                      scan_limit=args.scan_limit, sync=args.sync)


def _decode(text: str, is_hex: bool) -> bytes:
    if is_hex:
        try:
            return bytes.fromhex(text)
        except ValueError as exc:
            raise InvalidArgument(f"bad hex string: {exc}") from exc
    return text.encode()


class _CsvSink:
    def __init__(self, path: Optional[str]):
        self._own = path not in (None, "-")
        self._fh = open(path, "w", newline="") if self._own else sys.stdout
        self._writer = None

    def row(self, mapping: Dict[str, object]):
        if self._writer is None:
            self._writer = csv.DictWriter(self._fh, fieldnames=list(mapping))
            self._writer.writeheader()
        self._writer.writerow(mapping)

    def close(self):
        if self._own:
            self._fh.close()
        else:
            self._fh.flush()


# -- plain subcommands --------------------------------------------------------

def cmd_create(args) -> int:
    cfg = StoreConfig(branching=args.branching, sluggishness=args.sluggishness,
                      region_bits=args.region_bits,
                      memory_budget=args.memory_budget,
                      scan_limit=args.scan_limit,
                      wal_chunk_size=args.wal_chunk_size, sync=args.sync)
    st = Store.create(args.dir, cfg)
    st.close()
    print(f"created {args.dir} (branching={cfg.branching} "
          f"sluggishness={cfg.sluggishness} region_bits={cfg.region_bits})")
    return EXIT_OK


def cmd_populate(args) -> int:
    spec = _spec_from(args, ops=False)
    count = args.count if args.count is not None else spec.keys
    if os.path.isfile(os.path.join(args.dir, "trie-0.seg")):
        st = _open(args)
    elif os.path.isdir(args.dir) and os.listdir(args.dir):
        raise InvalidArgument(f"{args.dir} exists and is not a store")
    else:
        overrides = {k: v for k, v in (("memory_budget", args.memory_budget),
                                       ("scan_limit", args.scan_limit),
                                       ("sync", args.sync)) if v is not None}
        st = Store.create(args.dir, StoreConfig(**overrides))
    try:
        t0 = time.perf_counter()
        tally = {"inserted": 0, "updated": 0}
        for k, v in preload_items(spec, count):
            tally[st.put(k, v)] += 1
        st.flush()
        dt = time.perf_counter() - t0
    finally:
        st.close()
    rate = count / dt if dt > 0 else float("inf")
    print(f"populated {count} items in {dt:.2f}s ({rate:.0f} ops/s): "
          f"{tally['inserted']} inserted, {tally['updated']} updated")
    return EXIT_OK


def cmd_put(args) -> int:
    st = _open(args)
    try:
        result = st.put(_decode(args.key, args.hex), _decode(args.value, args.hex))
    finally:
        st.close()
    print(result)
    return EXIT_OK


def cmd_get(args) -> int:
    st = _open(args)
    try:
        value = st.get(_decode(args.key, args.hex))
    finally:
        st.close()
    if value is None:
        print("not found", file=sys.stderr)
        return EXIT_FAIL
    if args.hex:
        print(value.hex())
    else:
        sys.stdout.buffer.write(value + b"\n")
    return EXIT_OK


def cmd_del(args) -> int:
    st = _open(args)
    try:
        deleted = st.delete(_decode(args.key, args.hex))
    finally:
        st.close()
    print("deleted" if deleted else "not found")
    return EXIT_OK if deleted else EXIT_FAIL


def cmd_stats(args) -> int:
    sink = _CsvSink(args.csv)
    try:
        if args.sweep:
            slugs = [int(s) for s in args.sluggishness_set.split(",")]
            cps: List[int] = []
            c = 100
            while c < args.sweep_max:
                cps.append(c)
                c *= 10
            cps.append(args.sweep_max)
            for s in slugs:
                rows, _ = statsmod.structure_sweep(args.branching, s, cps,
                                                   seed=args.seed)
                for r in rows:
                    sink.row(r)
            return EXIT_OK
        if args.dir is None:
            raise InvalidArgument("stats needs a store directory (or --sweep)")
        st = _open(args)
        try:
            rep = statsmod.collect(st)
        finally:
            st.close()
        row = rep.as_dict()
        if not rep.conservation_holds():
            print(f"space accounting broken: {rep.data_accounted} accounted "
                  f"vs tail {rep.data_tail}", file=sys.stderr)
            sink.row(row)
            return EXIT_FAIL
        sink.row(row)
        return EXIT_OK
    finally:
        sink.close()


# -- bench --------------------------------------------------------------------

def _run_stream(st: Store, spec: WorkloadSpec, tid: int,
                keys: Sequence[bytes], model: Optional[dict],
                errors: List[str], latencies: List[float]):
    clock = time.perf_counter
    for op in op_stream(spec, tid, keys=keys):
        kind = op[0]
        t0 = clock()
        if kind == "get":
            got = st.get(op[1])
            latencies.append(clock() - t0)
            if model is not None and got != model.get(op[1]):
                errors.append(f"thread {tid}: get mismatch on {op[1].hex()[:16]}")
                if len(errors) > 10:
                    return
        elif kind == "put":
            st.put(op[1], op[2])
            latencies.append(clock() - t0)
            if model is not None:
                model[op[1]] = op[2]
        else:
            st.delete(op[1])
            latencies.append(clock() - t0)
            if model is not None:
                model.pop(op[1], None)


def cmd_bench(args) -> int:
    spec = _spec_from(args)
    if args.verify and spec.threads > 1 and not spec.partition:
        raise InvalidArgument("--verify with --threads > 1 needs --partition")
    st = _open(args)
    sink = _CsvSink(args.csv)
    errors: List[str] = []
    try:
        keys = [key_bytes(spec.seed, i, spec.key_size) for i in range(spec.keys)]
        preload_n = args.preload if args.preload is not None else spec.keys
        preload: Dict[bytes, bytes] = {}
        for k, v in preload_items(spec, preload_n):
            st.put(k, v)
            preload[k] = v
        st.flush()
        before = statsmod.collect(st)

        models: List[Optional[dict]] = [None] * spec.threads
        if args.verify:
            if spec.threads == 1:
                models = [dict(preload)]
            else:
                ranges = thread_ranges(spec)
                models = [{k: preload[k] for k in keys[lo:hi] if k in preload}
                          for lo, hi in ranges]

        lats: List[List[float]] = [[] for _ in range(spec.threads)]
        t0 = time.perf_counter()
        if spec.threads == 1:
            _run_stream(st, spec, 0, keys, models[0], errors, lats[0])
        else:
            import threading
            ts = [threading.Thread(target=_run_stream,
                                   args=(st, spec, t, keys, models[t], errors,
                                         lats[t]))
                  for t in range(spec.threads)]
            for t in ts:
                t.start()
            for t in ts:
                t.join()
        elapsed = time.perf_counter() - t0
        st.flush()
        after = statsmod.collect(st)

        if args.verify:
            if spec.partition and spec.threads > 1:
                ranges = thread_ranges(spec)
            else:
                ranges = [(0, spec.keys)]
            for model, (lo, hi) in zip(models, ranges):
                for k in keys[lo:hi]:
                    want = model.get(k) if model is not None else None
                    if model is not None and st.get(k) != want:
                        errors.append(f"final state mismatch on {k.hex()[:16]}")
                        break
        if not after.conservation_holds():
            errors.append("space accounting broken after run")

        amp = (after.data_tail / before.data_tail) if before.data_tail else None
        merged = sorted(x for lat in lats for x in lat)

        def pct_us(p: float) -> float:
            i = min(len(merged) - 1, int(p / 100 * len(merged)))
            return round(merged[i] * 1e6, 1)

        row: Dict[str, object] = {
            "ops": spec.ops, "keys": spec.keys, "get_pct": spec.get_pct,
            "put_pct": spec.put_pct, "delete_pct": spec.delete_pct,
            "distribution": spec.distribution, "value_sizes": spec.value_sizes,
            "threads": spec.threads, "partition": spec.partition,
            "seed": spec.seed, "elapsed_s": round(elapsed, 3),
            "ops_per_s": round(spec.ops / elapsed, 1) if elapsed else "",
            "latency_p50_us": pct_us(50) if merged else "",
            "latency_p95_us": pct_us(95) if merged else "",
            "latency_p99_us": pct_us(99) if merged else "",
            "verified": ("yes" if args.verify and not errors
                         else "no" if args.verify else ""),
            "records": after.records,
            "avg_path_length": round(after.avg_path_length, 4),
            "utilization": round(after.utilization, 4),
            "metadata_bytes": after.metadata_bytes,
            "hole_bytes": after.hole_bytes,
            "recycled_ratio": round(after.recycled_ratio, 4),
            "disk_amplification": round(amp, 4) if amp is not None else "",
        }
        sink.row(row)
    finally:
        sink.close()
        st.close()
    for e in errors:
        print(e, file=sys.stderr)
    return EXIT_FAIL if errors else EXIT_OK


# -- crash testing ------------------------------------------------------------

@dataclass
class CrashPoint:
    index: int
    mode: str            # "exit" or "tear"
    param: int           # script entry for exit, byte budget for tear
    acked: int = -1
    matched: Optional[int] = None
    child_code: Optional[int] = None
    recover_s: float = 0.0
    wal_bytes: int = 0
    error: str = ""

    def describe(self) -> str:
        base = (f"point {self.index}: {self.mode}@{self.param} "
                f"acked={self.acked} matched={self.matched} "
                f"wal={self.wal_bytes}B recover={self.recover_s * 1e3:.1f}ms")
        return base + (f" ERROR: {self.error}" if self.error else "")


@dataclass
class CrashMatrixResult:
    points: List[CrashPoint] = field(default_factory=list)

    @property
    def failures(self) -> List[CrashPoint]:
        return [p for p in self.points if p.error]


_MATCH_WINDOW = 4  # single-writer children keep at most one op in flight


def _read_ack(path: str) -> int:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        return -1
    lines = data.split()
    return int(lines[-1]) if lines else -1


def _verify_point(directory: str, script: List, preload: Dict[bytes, bytes],
                  point: CrashPoint):
    t0 = time.perf_counter()
    st = Store.open(directory)
    point.recover_s = time.perf_counter() - t0
    try:
        disk = dict(st.items())
    finally:
        st.close()
    model = dict(preload)
    j = point.acked
    if j < 0 and disk == model:
        point.matched = -1
        return
    limit = min(len(script), j + _MATCH_WINDOW + 1)
    for i in range(limit):
        apply_script_entry(model, script[i])
        if i >= j and disk == model:
            point.matched = i
            return
    point.error = (f"state matches no acked prefix (acked {j}, "
                   f"searched up to {limit - 1})")


def run_crash_matrix(root: str, spec: WorkloadSpec, points: int,
                     harness_seed: int = 0, batch_pct: int = 15,
                     tear_fraction: float = 0.5,
                     config: Optional[StoreConfig] = None,
                     keep_failed: bool = True) -> CrashMatrixResult:
    """Crash a scripted child at randomized points and verify recovery.

    Builds one pristine populated store, then per point: copy it, run the
    script in a child process that dies mid-run (plain exit at an entry
    boundary, or a torn write inside the log), reopen, and demand the
    recovered state equal the model at some prefix >= the last acked
    entry.  Torn-write budgets that turn out past the end of the run are
    halved and retried so every point is a real crash.
    """
    spec.validate()
    cfg = config or StoreConfig(sync="os")
    os.makedirs(root, exist_ok=True)
    pristine = os.path.join(root, "pristine")
    st = Store.create(pristine, cfg)
    try:
        preload = {}
        for k, v in preload_items(spec):
            st.put(k, v)
            preload[k] = v
    finally:
        st.close()

    script = list(crash_script(spec, batch_pct=batch_pct))
    rng = random.Random(harness_seed * 69_069 + 7)
    est_bytes = max(4096, spec.ops * 200)
    result = CrashMatrixResult()

    for i in range(points):
        mode = "tear" if rng.random() < tear_fraction else "exit"
        if mode == "exit":
            param = rng.randrange(len(script))
        else:
            # log-uniform so early, mid, and late tears all appear
            lo, hi = 6, max(7, est_bytes.bit_length())
            param = 1 << rng.randrange(lo, hi)
            param += rng.randrange(max(1, param))
        point = CrashPoint(index=i, mode=mode, param=param)
        result.points.append(point)

        workdir = os.path.join(root, f"pt{i:03d}")
        ack = os.path.join(root, f"pt{i:03d}.ack")
        for attempt in range(8):
            if os.path.exists(workdir):
                shutil.rmtree(workdir)
            if os.path.exists(ack):
                os.unlink(ack)
            shutil.copytree(pristine, workdir)
            code = _spawn_crash_child(workdir, spec, batch_pct, ack, point)
            point.child_code = code
            if point.mode == "tear" and code == 0 and point.param > 64:
                point.param //= 2  # budget outlived the run; tighten and retry
                continue
            break
        expected = {"exit": 42, "tear": 86}[point.mode]
        if point.child_code != expected:
            point.error = (f"child exited {point.child_code}, "
                           f"expected {expected}")
        else:
            point.acked = _read_ack(ack)
            wal_path = os.path.join(workdir, "wal.log")
            point.wal_bytes = (os.path.getsize(wal_path)
                               if os.path.exists(wal_path) else 0)
            _verify_point(workdir, script, preload, point)
        if not point.error or not keep_failed:
            shutil.rmtree(workdir, ignore_errors=True)
            if os.path.exists(ack):
                os.unlink(ack)
    return result


def _spawn_crash_child(workdir: str, spec: WorkloadSpec, batch_pct: int,
                       ack: str, point: CrashPoint) -> int:
    cmd = [sys.executable, "-m", "triekv", "crash-child", workdir,
           "--seed", str(spec.seed), "--ops", str(spec.ops),
           "--keys", str(spec.keys), "--key-size", str(spec.key_size),
           "--value-sizes", spec.value_sizes,
           "--batch-pct", str(batch_pct), "--ack", ack]
    env = dict(os.environ)
    env.pop(TEAR_ENV, None)
    if point.mode == "exit":
        cmd += ["--crash-at", str(point.param)]
    else:
        env[TEAR_ENV] = str(point.param)
    proc = subprocess.run(cmd, env=env, stdout=subprocess.DEVNULL,
                          stderr=subprocess.PIPE)
    if proc.returncode not in (0, 42, 86):
        point.error = (proc.stderr.decode(errors="replace").strip()
                       or f"child exit {proc.returncode}")[-500:]
    return proc.returncode


def cmd_crashtest(args) -> int:
    spec = WorkloadSpec(ops=args.ops, keys=args.keys, key_size=args.key_size,
                        value_sizes=args.value_sizes, seed=args.seed)
    result = run_crash_matrix(args.dir, spec, points=args.points,
                              harness_seed=args.seed,
                              batch_pct=args.batch_pct,
                              tear_fraction=args.tear_fraction)
    for p in result.points:
        if args.verbose or p.error:
            print(p.describe())
    bad = result.failures
    print(f"{len(result.points) - len(bad)}/{len(result.points)} "
          f"crash points verified")
    return EXIT_FAIL if bad else EXIT_OK


def cmd_crash_child(args) -> int:
    spec = WorkloadSpec(ops=args.ops, keys=args.keys, key_size=args.key_size,
                        value_sizes=args.value_sizes, seed=args.seed)
    st = Store.open(args.dir)
    ack_fd = os.open(args.ack, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o644)
    for i, entry in enumerate(crash_script(spec, batch_pct=args.batch_pct)):
        if entry[0] == "batch":
            st.write([op if op[0] == "put" else ("del", op[1])
                      for op in entry[1]])
        elif entry[0] == "put":
            st.put(entry[1], entry[2])
        else:
            st.delete(entry[1])
        os.write(ack_fd, b"%d\n" % i)
        if args.crash_at is not None and i >= args.crash_at:
            os._exit(42)
    st.close()
    os.close(ack_fd)
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="triekv", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("create", help="initialize a new store directory")
    p.add_argument("dir")
    _add_create_flags(p)
    p.set_defaults(fn=cmd_create)

    p = sub.add_parser("populate", help="bulk-load deterministic items")
    p.add_argument("dir")
    p.add_argument("--count", type=int, default=None,
                   help="items to load (default: --keys)")
    _add_workload_flags(p, ops=False)
    _add_open_flags(p)
    p.set_defaults(fn=cmd_populate)

    p = sub.add_parser("put", help="store one key/value pair")
    p.add_argument("dir")
    p.add_argument("key")
    p.add_argument("value")
    p.add_argument("--hex", action="store_true",
                   help="key and value are hex-encoded")
    _add_open_flags(p)
    p.set_defaults(fn=cmd_put)

    p = sub.add_parser("get", help="print the value for a key")
    p.add_argument("dir")
    p.add_argument("key")
    p.add_argument("--hex", action="store_true")
    _add_open_flags(p)
    p.set_defaults(fn=cmd_get)

    p = sub.add_parser("del", help="remove a key")
    p.add_argument("dir")
    p.add_argument("key")
    p.add_argument("--hex", action="store_true")
    _add_open_flags(p)
    p.set_defaults(fn=cmd_del)

    p = sub.add_parser("stats", help="report structure and space statistics")
    p.add_argument("dir", nargs="?")
    p.add_argument("--csv", default="-", help="output file, or - for stdout")
    p.add_argument("--sweep", action="store_true",
                   help="simulate structure growth instead of reading a store")
    p.add_argument("--sweep-max", type=int, default=100_000)
    p.add_argument("--sluggishness-set", default="1,2,4,8,16")
    p.add_argument("--branching", type=int, default=128,
                   choices=(64, 128, 256))
    p.add_argument("--seed", type=int, default=0)
    _add_open_flags(p)
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("bench", help="run a workload and report throughput")
    p.add_argument("dir")
    p.add_argument("--csv", default="-")
    p.add_argument("--preload", type=int, default=None,
                   help="items to load before timing (default: --keys)")
    p.add_argument("--verify", action="store_true",
                   help="check results against an in-memory model")
    _add_workload_flags(p)
    _add_open_flags(p)
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("crashtest",
                       help="kill scripted children at random points and "
                            "verify recovery")
    p.add_argument("dir", help="scratch directory for the pristine store "
                               "and per-point copies")
    p.add_argument("--points", type=int, default=20)
    p.add_argument("--ops", type=int, default=20_000)
    p.add_argument("--keys", type=int, default=2_000)
    p.add_argument("--key-size", type=int, default=32)
    p.add_argument("--value-sizes", default="fixed:128")
    p.add_argument("--batch-pct", type=int, default=15)
    p.add_argument("--tear-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(fn=cmd_crashtest)

    p = sub.add_parser("crash-child")  # internal: run by crashtest
    p.add_argument("dir")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--ops", type=int, required=True)
    p.add_argument("--keys", type=int, required=True)
    p.add_argument("--key-size", type=int, default=32)
    p.add_argument("--value-sizes", default="fixed:128")
    p.add_argument("--batch-pct", type=int, default=15)
    p.add_argument("--ack", required=True)
    p.add_argument("--crash-at", type=int, default=None)
    p.set_defaults(fn=cmd_crash_child)

    return ap


def main(argv: Optional[Sequence[str]] = None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (InvalidArgument, InvalidConfig) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StoreError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
