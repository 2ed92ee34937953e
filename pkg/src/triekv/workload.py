"""Deterministic workload generation for benchmarks and stress tests.

A :class:`WorkloadSpec` pins down everything about a run: operation count,
key-universe size, operation mix, key distribution, value sizing, thread
count, and a seed.  The same spec and seed always produce byte-identical
operation streams, so a run can be replayed against a model dict or across
processes and compared exactly.

Key and value payloads are derived from the seed with keyed BLAKE2b, not
from shared RNG state, so any key's bytes can be recomputed independently.
Zipfian choices use a precomputed CDF over ranks (rank 0 is hottest) and a
bisect per draw.
"""

from __future__ import annotations

import random
import struct
from bisect import bisect_left
from dataclasses import dataclass, replace
from hashlib import blake2b
from itertools import accumulate
from typing import Iterator, List, Optional, Sequence, Tuple

from .errors import InvalidArgument

__all__ = [
    "WorkloadSpec",
    "key_bytes",
    "value_bytes",
    "preload_items",
    "op_stream",
    "thread_ranges",
    "ZipfChooser",
    "crash_script",
    "apply_script_entry",
]

DEFAULT_KEY_SIZE = 32
DEFAULT_VALUE_SIZE = 128

# an op is ("get", key) | ("put", key, value) | ("delete", key)
Op = Tuple


def _seed_bytes(seed: int) -> bytes:
    return struct.pack("<q", seed & 0x7FFFFFFFFFFFFFFF)


def key_bytes(seed: int, index: int, size: int = DEFAULT_KEY_SIZE) -> bytes:
    # keyed digest so distinct seeds give disjoint-looking key sets
    return blake2b(struct.pack("<Q", index), key=_seed_bytes(seed),
                   digest_size=size).digest()


def value_bytes(seed: int, index: int, size: int = DEFAULT_VALUE_SIZE) -> bytes:
    if size == 0:
        return b""
    block = blake2b(struct.pack("<Q", index), key=_seed_bytes(seed ^ 0x5CA1AB1E),
                    digest_size=64).digest()
    reps = -(-size // len(block))
    return (block * reps)[:size]


class ZipfChooser:
    """Bounded Zipf over ranks 0..n-1 with weight 1/(rank+1)**exponent."""

    def __init__(self, n: int, exponent: float):
        if n <= 0 or exponent <= 0:
            raise InvalidArgument("zipf needs n > 0 and exponent > 0")
        weights = [1.0 / (r + 1) ** exponent for r in range(n)]
        total = sum(weights)
        self._cdf = list(accumulate(w / total for w in weights))
        self._cdf[-1] = 1.0  # guard against float round-down

    def pick(self, rng: random.Random) -> int:
        return bisect_left(self._cdf, rng.random())


class _ValueSizer:
    """Parses a value-size spec string into a per-op size chooser.

    Forms: "fixed:N", "choice:a,b,c" (uniform), "zipf:lo,hi" (rank lo is
    hottest).
    """

    def __init__(self, spec: str):
        try:
            mode, _, arg = spec.partition(":")
            if mode == "fixed":
                self.sizes: List[int] = [int(arg)]
                self._zipf: Optional[ZipfChooser] = None
            elif mode == "choice":
                self.sizes = [int(p) for p in arg.split(",")]
                self._zipf = None
            elif mode == "zipf":
                lo, hi = (int(p) for p in arg.split(","))
                if lo > hi:
                    raise ValueError("empty range")
                self.sizes = list(range(lo, hi + 1))
                self._zipf = ZipfChooser(len(self.sizes), 0.99)
            else:
                raise ValueError(f"unknown mode {mode!r}")
        except ValueError as exc:
            raise InvalidArgument(f"bad value-size spec {spec!r}: {exc}") from exc
        if not self.sizes or any(s < 0 for s in self.sizes):
            raise InvalidArgument(f"bad value-size spec {spec!r}")

    def pick(self, rng: random.Random) -> int:
        if len(self.sizes) == 1:
            return self.sizes[0]
        if self._zipf is not None:
            return self.sizes[self._zipf.pick(rng)]
        return rng.choice(self.sizes)


@dataclass(frozen=True)
class WorkloadSpec:
    ops: int = 1_000_000
    keys: int = 100_000
    get_pct: int = 50           # put covers both insert and update
    put_pct: int = 30
    delete_pct: int = 20
    distribution: str = "uniform"   # "uniform" | "zipfian"
    zipf_exponent: float = 0.99     # > 0, zipfian only
    value_sizes: str = f"fixed:{DEFAULT_VALUE_SIZE}"
    key_size: int = DEFAULT_KEY_SIZE
    threads: int = 1
    partition: bool = False         # give each thread a disjoint key range
    seed: int = 0

    def validate(self) -> None:
        if self.ops < 0 or self.keys <= 0:
            raise InvalidArgument("ops must be >= 0 and keys > 0")
        mix = (self.get_pct, self.put_pct, self.delete_pct)
        if any(p < 0 for p in mix) or sum(mix) != 100:
            raise InvalidArgument(f"op mix {mix} must be >= 0 and sum to 100")
        if self.distribution not in ("uniform", "zipfian"):
            raise InvalidArgument(f"unknown distribution {self.distribution!r}")
        if self.zipf_exponent <= 0:
            raise InvalidArgument("zipf_exponent must be > 0")
        if not 1 <= self.key_size <= 64:
            raise InvalidArgument("key_size must be in 1..64")
        if self.threads < 1:
            raise InvalidArgument("threads must be >= 1")
        if self.partition and self.keys < self.threads:
            raise InvalidArgument("partitioning needs keys >= threads")
        _ValueSizer(self.value_sizes)  # raises on a bad spec

    def with_overrides(self, **kw) -> "WorkloadSpec":
        spec = replace(self, **kw)
        spec.validate()
        return spec


def thread_ranges(spec: WorkloadSpec) -> List[Tuple[int, int]]:
    """Disjoint [lo, hi) key-index ranges, one per thread."""
    base, extra = divmod(spec.keys, spec.threads)
    out, lo = [], 0
    for t in range(spec.threads):
        hi = lo + base + (1 if t < extra else 0)
        out.append((lo, hi))
        lo = hi
    return out


def preload_items(spec: WorkloadSpec,
                  count: Optional[int] = None) -> Iterator[Tuple[bytes, bytes]]:
    """Deterministic (key, value) pairs for seeding a store.

    Values follow the workload's value-size rule but their sizes are
    drawn from a seed-derived RNG, so re-running the same preload
    rewrites identical bytes (all updates, item count unchanged).
    """
    spec.validate()
    n = spec.keys if count is None else count
    sizer = _ValueSizer(spec.value_sizes)
    rng = random.Random(spec.seed * 1_000_003 + 0xBEEF)
    for i in range(n):
        yield (key_bytes(spec.seed, i, spec.key_size),
               value_bytes(spec.seed, i, sizer.pick(rng)))


def op_stream(spec: WorkloadSpec, thread_id: int = 0,
              keys: Optional[Sequence[bytes]] = None) -> Iterator[Op]:
    """Ops for one thread; same (spec, thread_id) always yields the same ops.

    With partition=True the thread only touches its own key range, so
    per-thread model dicts stay exact oracles even when threads run
    concurrently.
    """
    spec.validate()
    if not 0 <= thread_id < spec.threads:
        raise InvalidArgument(f"thread_id {thread_id} out of range")
    if keys is None:
        keys = [key_bytes(spec.seed, i, spec.key_size) for i in range(spec.keys)]

    if spec.partition:
        lo, hi = thread_ranges(spec)[thread_id]
    else:
        lo, hi = 0, spec.keys
    span = hi - lo

    rng = random.Random(spec.seed * 1_000_003 + thread_id + 1)
    zipf = (ZipfChooser(span, spec.zipf_exponent)
            if spec.distribution == "zipfian" else None)
    sizer = _ValueSizer(spec.value_sizes)
    get_cut = spec.get_pct
    put_cut = spec.get_pct + spec.put_pct

    base, extra = divmod(spec.ops, spec.threads)
    my_ops = base + (1 if thread_id < extra else 0)

    for _ in range(my_ops):
        idx = lo + (zipf.pick(rng) if zipf is not None else rng.randrange(span))
        key = keys[idx]
        r = rng.randrange(100)
        if r < get_cut:
            yield ("get", key)
        elif r < put_cut:
            yield ("put", key, rng.randbytes(sizer.pick(rng)))
        else:
            yield ("delete", key)


def crash_script(spec: WorkloadSpec, batch_pct: int = 15,
                 batch_max: int = 6) -> Iterator[Op]:
    """Mutation-only op sequence for crash testing.

    Besides single puts and deletes it mixes in multi-op batch entries
    ("batch", [ops]) so recovery checks can prove batches land whole or
    not at all.  Deterministic for a given spec.
    """
    spec.validate()
    if not 0 <= batch_pct <= 100:
        raise InvalidArgument("batch_pct must be in 0..100")
    rng = random.Random(spec.seed * 7_919 + 0xC4A5)
    sizer = _ValueSizer(spec.value_sizes)
    keys = [key_bytes(spec.seed, i, spec.key_size) for i in range(spec.keys)]
    emitted = 0
    while emitted < spec.ops:
        def one(kind=None):
            key = keys[rng.randrange(spec.keys)]
            if kind is None:
                kind = "put" if rng.randrange(100) < 70 else "delete"
            if kind == "put":
                return ("put", key, rng.randbytes(sizer.pick(rng)))
            return ("delete", key)

        if rng.randrange(100) < batch_pct:
            size = min(rng.randrange(2, batch_max + 1), spec.ops - emitted)
            if size >= 2:
                yield ("batch", [one() for _ in range(size)])
                emitted += size
                continue
        yield one()
        emitted += 1


def apply_script_entry(model: dict, entry: Op) -> None:
    """Apply one crash-script entry to a plain-dict model."""
    if entry[0] == "batch":
        for op in entry[1]:
            apply_script_entry(model, op)
    elif entry[0] == "put":
        model[entry[1]] = entry[2]
    elif entry[0] == "delete":
        model.pop(entry[1], None)
    else:
        raise InvalidArgument(f"unknown script entry {entry[0]!r}")
