"""Structure and space statistics.

Two routes to the same numbers:

* :func:`collect` walks a live store (exclusive access) and measures the
  real on-disk structure: path lengths, child-table utilization, metadata
  footprint, data-space accounting down to the byte.

* :class:`SimTrie` replays the exact node-building rules on digests alone,
  keeping incremental aggregates.  It exists so multi-million-key sweeps
  run in seconds, and it is only trusted because tests pin its aggregates
  to :func:`collect` output on stores built from the same key stream.

Conservation: every byte below the data-space tail is either a used
record body, a hole body, or envelope overhead.  ``StatsReport`` exposes
the identity so callers can assert it after arbitrary workloads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from hashlib import blake2b
from typing import Dict, Iterable, List, Optional, Tuple

from . import addressing as adr
from . import keyhash, layout

__all__ = ["StatsReport", "collect", "SimTrie", "structure_sweep", "SWEEP_FIELDS"]


@dataclass
class StatsReport:
    branching: int
    sluggishness: int
    records: int
    node_count: int
    occupied_slots: int
    total_path: int               # sum over records of nodes-on-path
    max_chain_hashes: int         # largest distinct-digest count in one chain
    chains_over_budget: int       # chains holding more than s distinct digests
    metadata_bytes: int           # node_count * node_size
    user_key_bytes: int
    user_value_bytes: int
    used_body_bytes: int          # sum of used envelope capacities
    used_envelopes: int
    hole_count: int
    hole_bytes: int               # sum of free envelope capacities
    trie_tail: int
    data_tail: int
    trie_free_slots: int
    alloc_calls: int
    recycled_allocs: int
    disk_amplification: Optional[float] = None

    @property
    def avg_path_length(self) -> float:
        return self.total_path / self.records if self.records else 0.0

    @property
    def utilization(self) -> float:
        cap = self.node_count * self.branching
        return self.occupied_slots / cap if cap else 0.0

    @property
    def user_bytes(self) -> int:
        return self.user_key_bytes + self.user_value_bytes

    @property
    def envelope_overhead_bytes(self) -> int:
        return layout.ENV_OVERHEAD * (self.used_envelopes + self.hole_count)

    @property
    def recycled_ratio(self) -> float:
        return self.recycled_allocs / self.alloc_calls if self.alloc_calls else 0.0

    @property
    def data_accounted(self) -> int:
        return self.used_body_bytes + self.hole_bytes + self.envelope_overhead_bytes

    def conservation_holds(self) -> bool:
        return self.data_accounted == self.data_tail

    def as_dict(self) -> Dict[str, object]:
        out: Dict[str, object] = {f.name: getattr(self, f.name) for f in fields(self)}
        for name in ("avg_path_length", "utilization", "user_bytes",
                     "envelope_overhead_bytes", "recycled_ratio"):
            out[name] = getattr(self, name)
        return out


class _WalkAccumulator:
    def __init__(self, sluggishness: int, ctx):
        self.s = sluggishness
        self.ctx = ctx
        self.nodes = 0
        self.occupied = 0
        self.records = 0
        self.total_path = 0
        self.key_bytes = 0
        self.value_bytes = 0
        self.used_body = 0
        self.max_chain = 0
        self.over_budget = 0

    def node(self, node: int, depth: int, n_children: int, n_chains: int):
        self.nodes += 1
        self.occupied += n_children + n_chains

    def chain(self, node: int, depth: int, c: int, entries):
        distinct = len({hkey for _, hkey, _, _, _ in entries})
        self.max_chain = max(self.max_chain, distinct)
        if distinct > self.s:
            self.over_budget += 1
        for env, _, ks, vs, _ in entries:
            self.records += 1
            self.total_path += depth + 1
            self.key_bytes += ks
            self.value_bytes += vs
            mm, off = self.ctx.view(adr.SP_DATA, env)
            self.used_body += layout.U32.unpack_from(mm, off)[0]


def collect(store) -> "StatsReport":
    """Measure a live store.  Takes the store's exclusive gate."""
    from .spaces import OpCtx  # local import to avoid a cycle at module load

    with store._gate:
        store._check_live()
        trie = store._trie
        ctx = OpCtx(store._sm)
        acc = _WalkAccumulator(trie.s, ctx)
        try:
            trie.walk(ctx, on_node=acc.node, on_chain=acc.chain)
        finally:
            ctx.finish()
        hole_count, hole_bytes = store._data_alloc.hole_stats()
        sm = store._sm
        return StatsReport(
            branching=trie.b,
            sluggishness=trie.s,
            records=acc.records,
            node_count=acc.nodes,
            occupied_slots=acc.occupied,
            total_path=acc.total_path,
            max_chain_hashes=acc.max_chain,
            chains_over_budget=acc.over_budget,
            metadata_bytes=acc.nodes * trie.nl.node_size,
            user_key_bytes=acc.key_bytes,
            user_value_bytes=acc.value_bytes,
            used_body_bytes=acc.used_body,
            used_envelopes=acc.records,
            hole_count=hole_count,
            hole_bytes=hole_bytes,
            trie_tail=sm.tails[adr.SP_TRIE],
            data_tail=sm.tails[adr.SP_DATA],
            trie_free_slots=store._node_alloc.free_depth(),
            alloc_calls=store._data_alloc.alloc_calls,
            recycled_allocs=store._data_alloc.recycled,
        )


class SimTrie:
    """Structural replay of node building for digests, with running totals.

    Implements the same placement rules as the on-disk structure: chains
    grow until they hold more than ``sluggishness`` distinct digests AND
    can be separated at some deeper digest character; splitting builds the
    minimal run of nodes and regroups by the next character.  Tracks node
    count, occupied slots, record count, and summed path length without
    touching disk.
    """

    __slots__ = ("b", "s", "max_chars", "node_size", "root",
                 "nodes", "occupied", "records", "total_path")

    def __init__(self, branching: int, sluggishness: int):
        self.b = branching
        self.s = sluggishness
        self.max_chars = keyhash.max_chars(branching)
        self.node_size = layout.NodeLayout(branching).node_size
        self.root: dict = {}
        self.nodes = 1
        self.occupied = 0
        self.records = 0
        self.total_path = 0

    @property
    def avg_path_length(self) -> float:
        return self.total_path / self.records if self.records else 0.0

    @property
    def utilization(self) -> float:
        return self.occupied / (self.nodes * self.b)

    @property
    def metadata_bytes(self) -> int:
        return self.nodes * self.node_size

    def insert(self, h: bytes) -> str:
        b = self.b
        node, d = self.root, 0
        while True:
            c = keyhash.char_at(h, d, b)
            slot = node.get(c)
            if slot is None:
                node[c] = [h]
                self.occupied += 1
                self.records += 1
                self.total_path += d + 1
                return "inserted"
            if isinstance(slot, dict):
                node, d = slot, d + 1
                continue
            chain: List[bytes] = slot
            if h in chain:
                return "updated"
            chain.append(h)
            self.records += 1
            self.total_path += d + 1
            if len(chain) > self.s and self._separable(chain, d + 1):
                # cancel the chain's current placement, then re-place deeper
                self.occupied -= 1
                self.total_path -= len(chain) * (d + 1)
                self._place(node, d, c, chain)
            return "inserted"

    def _separable(self, hashes: Iterable[bytes], from_depth: int) -> bool:
        b = self.b
        for d in range(from_depth, self.max_chars):
            it = iter(hashes)
            first = keyhash.char_at(next(it), d, b)
            if any(keyhash.char_at(h, d, b) != first for h in it):
                return True
        return False

    def _place(self, parent: dict, pd: int, pc: int, records: List[bytes]):
        nd = pd + 1
        if len(records) <= self.s or not self._separable(records, nd):
            parent[pc] = records
            self.occupied += 1
            self.total_path += len(records) * (pd + 1)
            return
        child: dict = {}
        self.nodes += 1
        self.occupied += 1
        parent[pc] = child
        groups: Dict[int, List[bytes]] = {}
        for h in records:
            groups.setdefault(keyhash.char_at(h, nd, self.b), []).append(h)
        for gc, grp in groups.items():
            self._place(child, nd, gc, grp)


SWEEP_FIELDS = ("branching", "sluggishness", "n", "avg_path_length",
                "utilization", "metadata_bytes")


def sweep_digest_seed(seed: int) -> bytes:
    return blake2b(struct.pack("<q", seed & 0x7FFFFFFFFFFFFFFF),
                   digest_size=32).digest()


def structure_sweep(branching: int, sluggishness: int, checkpoints: List[int],
                    seed: int = 0, key_size: int = 32,
                    sample_every: int = 0) -> Tuple[List[dict], List[Tuple[int, float]]]:
    """Grow a simulated structure and report rows at the given sizes.

    Returns (rows, samples): one dict per checkpoint with SWEEP_FIELDS,
    plus (n, utilization) samples every ``sample_every`` inserts when
    requested (for watching utilization cycles at fine grain).
    """
    from .workload import key_bytes as wl_key

    digest_seed = sweep_digest_seed(seed)
    sim = SimTrie(branching, sluggishness)
    rows: List[dict] = []
    samples: List[Tuple[int, float]] = []
    todo = sorted(set(checkpoints))
    for n in range(1, todo[-1] + 1):
        sim.insert(keyhash.hash_key(wl_key(seed, n - 1, key_size), digest_seed))
        if sample_every and n % sample_every == 0:
            samples.append((n, sim.utilization))
        if todo and n == todo[0]:
            todo.pop(0)
            rows.append({
                "branching": branching,
                "sluggishness": sluggishness,
                "n": n,
                "avg_path_length": sim.avg_path_length,
                "utilization": sim.utilization,
                "metadata_bytes": sim.metadata_bytes,
            })
    return rows, samples
