"""Workload generator: determinism, mix ratios, zipf shape, partitioning."""

import pytest

from triekv.errors import InvalidArgument
from triekv.workload import (
    WorkloadSpec,
    ZipfChooser,
    key_bytes,
    op_stream,
    preload_items,
    thread_ranges,
    value_bytes,
)

from oracles import zipf_slope


def test_spec_validation_rejects_bad_fields():
    good = WorkloadSpec()
    good.validate()
    for bad in (
        dict(get_pct=60),                       # mix sums to 110
        dict(get_pct=-10, put_pct=90),          # negative slice
        dict(distribution="gaussian"),
        dict(zipf_exponent=0.0),
        dict(key_size=0),
        dict(key_size=65),
        dict(threads=0),
        dict(keys=2, threads=4, partition=True),
        dict(value_sizes="fixed:-1"),
        dict(value_sizes="choice:"),
        dict(value_sizes="zipf:300,200"),
        dict(value_sizes="gaussian:1,2"),
    ):
        with pytest.raises(InvalidArgument):
            good.with_overrides(**bad)


def test_key_and_value_bytes_are_stable_and_sized():
    assert key_bytes(7, 0) == key_bytes(7, 0)
    assert key_bytes(7, 0) != key_bytes(7, 1)
    assert key_bytes(7, 0) != key_bytes(8, 0)
    assert len(key_bytes(7, 0, 48)) == 48
    assert len(value_bytes(7, 3, 1024)) == 1024
    assert value_bytes(7, 3, 0) == b""
    # value derivation is independent of key derivation at the same index
    assert key_bytes(7, 3, 32) != value_bytes(7, 3, 32)


def test_streams_are_reproducible_and_thread_distinct():
    spec = WorkloadSpec(ops=500, keys=200, seed=42, threads=2)
    a = list(op_stream(spec, 0))
    b = list(op_stream(spec, 0))
    assert a == b
    assert list(op_stream(spec, 1)) != a
    total = len(a) + len(list(op_stream(spec, 1)))
    assert total == spec.ops


def test_mix_ratio_tracks_percentages():
    spec = WorkloadSpec(ops=20_000, keys=500, get_pct=50, put_pct=30,
                        delete_pct=20, seed=3)
    counts = {"get": 0, "put": 0, "delete": 0}
    for op in op_stream(spec):
        counts[op[0]] += 1
    # binomial std dev at p=0.5, n=2e4 is ~70; allow ~5 sigma
    assert abs(counts["get"] - 10_000) < 400
    assert abs(counts["put"] - 6_000) < 400
    assert abs(counts["delete"] - 4_000) < 400


def test_zipf_sample_slope_matches_exact_distribution():
    n, draws, theta = 1_000, 200_000, 0.99
    chooser = ZipfChooser(n, theta)
    import random

    rng = random.Random(11)
    counts = [0] * n
    for _ in range(draws):
        counts[chooser.pick(rng)] += 1
    # oracle route: slope fitted on the exact bounded-zipf expectations
    weights = [1.0 / (r + 1) ** theta for r in range(n)]
    total = sum(weights)
    exact = [draws * w / total for w in weights]
    assert counts[0] > counts[n // 2] > counts[n - 1]
    assert abs(zipf_slope(counts) - zipf_slope(exact)) < 0.05


def test_zipfian_stream_skews_and_uniform_does_not():
    base = WorkloadSpec(ops=30_000, keys=1_000, get_pct=100, put_pct=0,
                        delete_pct=0, seed=5)
    hot = {}
    for dist in ("uniform", "zipfian"):
        spec = base.with_overrides(distribution=dist)
        keys = [key_bytes(spec.seed, i) for i in range(spec.keys)]
        counts = dict.fromkeys(range(spec.keys), 0)
        index = {k: i for i, k in enumerate(keys)}
        for op in op_stream(spec, keys=keys):
            counts[index[op[1]]] += 1
        hot[dist] = max(counts.values())
    assert hot["zipfian"] > 5 * hot["uniform"]


def test_value_size_modes():
    fixed = WorkloadSpec(ops=200, keys=50, get_pct=0, put_pct=100,
                         delete_pct=0, value_sizes="fixed:64", seed=1)
    assert {len(op[2]) for op in op_stream(fixed)} == {64}

    choice = fixed.with_overrides(value_sizes="choice:128,256,1024", ops=3_000)
    seen = {}
    for op in op_stream(choice):
        seen[len(op[2])] = seen.get(len(op[2]), 0) + 1
    assert set(seen) == {128, 256, 1024}
    assert min(seen.values()) > 3_000 // 6  # roughly uniform across choices

    ranged = fixed.with_overrides(value_sizes="zipf:128,256", ops=3_000)
    sizes = {}
    for op in op_stream(ranged):
        sizes[len(op[2])] = sizes.get(len(op[2]), 0) + 1
    assert min(sizes) >= 128 and max(sizes) <= 256
    assert sizes[128] > sizes.get(256, 0)  # low end of the range is hottest


def test_preload_is_idempotent_and_follows_size_spec():
    spec = WorkloadSpec(keys=300, value_sizes="choice:128,256,1024", seed=9)
    first = list(preload_items(spec))
    second = list(preload_items(spec))
    assert first == second
    assert len(first) == 300
    assert len({k for k, _ in first}) == 300
    assert {len(v) for _, v in first} <= {128, 256, 1024}
    assert list(preload_items(spec, count=5)) == first[:5]


def test_partitioned_threads_touch_disjoint_keys():
    spec = WorkloadSpec(ops=2_000, keys=100, threads=4, partition=True, seed=6)
    ranges = thread_ranges(spec)
    assert ranges[0][0] == 0 and ranges[-1][1] == spec.keys
    for (_, hi), (lo, _) in zip(ranges, ranges[1:]):
        assert hi == lo
    keys = [key_bytes(spec.seed, i) for i in range(spec.keys)]
    index = {k: i for i, k in enumerate(keys)}
    for t, (lo, hi) in enumerate(ranges):
        touched = {index[op[1]] for op in op_stream(spec, t, keys=keys)}
        assert touched <= set(range(lo, hi))
