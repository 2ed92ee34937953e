"""Hash-indexed tree with compressed suffixes and reluctant node splitting.

Keys are located by their 256-bit digest, consumed a fixed number of bits at
a time from the most significant end.  Interior nodes hold one slot per
possible character; a slot is either empty, a pointer to a deeper node, or
the head of a chain of records whose digests all share the path prefix.  A
chain may hold up to `sluggishness` distinct digests (plus any number of
records colliding on the same digest); only when one more distinct digest
arrives is the chain pushed down, creating the minimal run of nodes needed
to separate the digests at their first differing character.  Deletions
reverse this: a node left with a single chain (or nothing) is dissolved and
the chain reattached to its parent, so the tree's footprint follows the
live population both ways.  Nodes with a surviving *node* child are never
dissolved — a node's position encodes the digest prefix depth, so interior
nodes must stay where they were created.

Digests that agree on every extractable character (possible when the
character width does not divide 256 evenly) can never be separated; a
chain of such digests stays where it is and may exceed the sluggishness
bound, rather than growing a run of nodes that would separate nothing.

Child pointers and chain links hold envelope addresses in the data space;
record bytes start after the envelope header.  All mutations go through the
context's write vector so one operation becomes one atomic log record.

The context object also carries the locking discipline.  This module calls
`lock / unlock / upgrade` at the points a concurrent store needs them; the
base context implements them as no-ops, which is the single-threaded case.
"""

from __future__ import annotations

from . import addressing as adr
from . import keyhash, layout
from .spaces import OpCtx

__all__ = ["EMPTY", "TREE", "DATA", "NULL", "OpCtx", "Trie"]

NULL = adr.NULL_ADDR

EMPTY, TREE, DATA = 0, 1, 2

NEXT_OFF = layout.ENV_HEADER + 40      # record's chain link
VSIZE_OFF = layout.ENV_HEADER + 36
KEY_OFF = layout.ENV_HEADER + layout.REC_FIXED


class Trie:
    def __init__(self, sm, cfg, node_alloc, data_alloc):
        self.sm = sm
        self.cfg = cfg
        self.b = cfg.branching
        self.s = cfg.sluggishness
        self.nl = layout.NodeLayout(cfg.branching)
        self.max_chars = keyhash.max_chars(cfg.branching)
        self.node_alloc = node_alloc
        self.data_alloc = data_alloc
        self.root = NULL
        b = self.b
        self._template = (
            b"\xff" * 8 + bytes(b // 4) + b"\xff" * (8 * b) + bytes(8)
        )

    # -- node primitives -----------------------------------------------------

    def init_node(self, ctx: OpCtx, node: int, parent: int):
        blob = bytearray(self._template)
        layout.U64.pack_into(blob, 0, parent)
        ctx.write(adr.SP_TRIE, node, bytes(blob))

    def parent_of(self, ctx: OpCtx, node: int) -> int:
        mm, off = ctx.view(adr.SP_TRIE, node)
        return layout.U64.unpack_from(mm, off)[0]

    def slot(self, ctx: OpCtx, node: int, c: int):
        mm, off = ctx.view(adr.SP_TRIE, node)
        byte_i = c >> 3
        bit = 1 << (c & 7)
        if mm[off + 8 + byte_i] & bit:
            kind = TREE
        elif mm[off + 8 + self.b // 8 + byte_i] & bit:
            kind = DATA
        else:
            return EMPTY, NULL
        return kind, layout.U64.unpack_from(mm, off + self.nl.children_off + 8 * c)[0]

    def set_slot(self, ctx: OpCtx, node: int, c: int, kind: int, val: int):
        mm, off = ctx.view(adr.SP_TRIE, node)
        byte_i = c >> 3
        bit = 1 << (c & 7)
        chd_addr = node + 8 + byte_i
        data_addr = node + 8 + self.b // 8 + byte_i
        chd = mm[off + 8 + byte_i]
        dat = mm[off + 8 + self.b // 8 + byte_i]
        want_chd = chd | bit if kind == TREE else chd & ~bit
        want_dat = dat | bit if kind == DATA else dat & ~bit
        if want_chd != chd:
            ctx.write(adr.SP_TRIE, chd_addr, bytes((want_chd,)))
        if want_dat != dat:
            ctx.write(adr.SP_TRIE, data_addr, bytes((want_dat,)))
        ctx.write_u64(adr.SP_TRIE, node + self.nl.children_off + 8 * c, val)

    def masks(self, ctx: OpCtx, node: int):
        """(node child mask, data chain mask) as integers, bit i = character i."""
        mm, off = ctx.view(adr.SP_TRIE, node)
        nb = self.b // 8
        chd = int.from_bytes(mm[off + 8 : off + 8 + nb], "little")
        dat = int.from_bytes(mm[off + 8 + nb : off + 8 + 2 * nb], "little")
        return chd, dat

    def occupied_slots(self, ctx: OpCtx, node: int):
        """(count, sole character, its kind, its value); char fields valid for count == 1."""
        chd, dat = self.masks(ctx, node)
        merged = chd | dat
        count = merged.bit_count()
        if count != 1:
            return count, -1, EMPTY, NULL
        c = merged.bit_length() - 1
        kind = TREE if chd else DATA
        mm, off = ctx.view(adr.SP_TRIE, node)
        return 1, c, kind, layout.U64.unpack_from(mm, off + self.nl.children_off + 8 * c)[0]

    # -- record primitives ---------------------------------------------------

    def rec_meta(self, ctx: OpCtx, env: int):
        mm, off = ctx.view(adr.SP_DATA, env)
        return layout.REC_META.unpack_from(mm, off + layout.ENV_HEADER)

    def rec_key(self, ctx: OpCtx, env: int, ksize: int) -> bytes:
        mm, off = ctx.view(adr.SP_DATA, env)
        return bytes(mm[off + KEY_OFF : off + KEY_OFF + ksize])

    def rec_value(self, ctx: OpCtx, env: int, ksize: int, vsize: int) -> bytes:
        mm, off = ctx.view(adr.SP_DATA, env)
        start = off + KEY_OFF + ksize
        return bytes(mm[start : start + vsize])

    def rec_capacity(self, ctx: OpCtx, env: int) -> int:
        mm, off = ctx.view(adr.SP_DATA, env)
        return layout.U32.unpack_from(mm, off)[0]

    def write_record(self, ctx: OpCtx, env: int, hkey: bytes, key: bytes, value: bytes, nxt: int):
        blob = layout.REC_META.pack(hkey, len(key), len(value), nxt) + key + value
        ctx.write(adr.SP_DATA, env + layout.ENV_HEADER, blob)

    def set_next(self, ctx: OpCtx, env: int, nxt: int):
        ctx.write_u64(adr.SP_DATA, env + NEXT_OFF, nxt)

    def chain_entries(self, ctx: OpCtx, head: int):
        """[(env, hkey, ksize, vsize, next)] following the chain links."""
        out = []
        env = head
        while env != NULL:
            hkey, ks, vs, nxt = self.rec_meta(ctx, env)
            out.append((env, hkey, ks, vs, nxt))
            env = nxt
        return out

    # -- descent -------------------------------------------------------------

    def descend(self, ctx: OpCtx, hkey: bytes):
        """Walk to the slot owning this digest: (node, depth, char, kind, value)."""
        reader = keyhash.char_reader(hkey, self.b)
        node = self.root
        ctx.lock(node, 0)
        d = 0
        while True:
            c = reader(d)
            kind, val = self.slot(ctx, node, c)
            if kind != TREE:
                return node, d, c, kind, val
            ctx.lock(val, d + 1)
            if ctx.couple:
                ctx.unlock(node)
            node = val
            d += 1

    # -- operations ----------------------------------------------------------

    def lookup(self, ctx: OpCtx, key: bytes, hkey: bytes):
        node, d, c, kind, head = self.descend(ctx, hkey)
        try:
            if kind == EMPTY:
                return None
            env = head
            while env != NULL:
                rh, ks, vs, nxt = self.rec_meta(ctx, env)
                if rh == hkey and ks == len(key) and self.rec_key(ctx, env, ks) == key:
                    return self.rec_value(ctx, env, ks, vs)
                env = nxt
            return None
        finally:
            ctx.unlock(node)

    def insert(self, ctx: OpCtx, key: bytes, hkey: bytes, value: bytes) -> str:
        node, d, c, kind, head = self.descend(ctx, hkey)
        try:
            if kind == EMPTY:
                ctx.upgrade(node)
                env, _ = self.data_alloc.alloc(layout.REC_FIXED + len(key) + len(value), ctx)
                self.write_record(ctx, env, hkey, key, value, NULL)
                self.set_slot(ctx, node, c, DATA, env)
                return "inserted"
            entries = self.chain_entries(ctx, head)
            prev = NULL
            for env, rh, ks, vs, nxt in entries:
                if rh == hkey and ks == len(key) and self.rec_key(ctx, env, ks) == key:
                    ctx.upgrade(node)
                    self._update(ctx, node, c, prev, env, hkey, key, value, ks, nxt)
                    return "updated"
                prev = env
            distinct = {rh for _, rh, _, _, _ in entries}
            distinct.add(hkey)
            ctx.upgrade(node)
            env, _ = self.data_alloc.alloc(layout.REC_FIXED + len(key) + len(value), ctx)
            self.write_record(ctx, env, hkey, key, value, head)
            if len(distinct) > self.s and self._separable(distinct, d + 1):
                records = [(env, hkey)] + [(e, h) for e, h, _, _, _ in entries]
                self._place_group(ctx, node, d, c, records)
            else:
                self.set_slot(ctx, node, c, DATA, env)
            return "inserted"
        finally:
            ctx.unlock(node)

    def _update(self, ctx, node, c, prev, env, hkey, key, value, ksize, nxt):
        cap = self.rec_capacity(ctx, env)
        if layout.REC_FIXED + ksize + len(value) <= cap:
            ctx.write(adr.SP_DATA, env + VSIZE_OFF, layout.U32.pack(len(value)))
            if value:
                ctx.write(adr.SP_DATA, env + KEY_OFF + ksize, value)
            return
        new_env, _ = self.data_alloc.alloc(layout.REC_FIXED + ksize + len(value), ctx)
        self.write_record(ctx, new_env, hkey, key, value, nxt)
        if prev != NULL:
            self.set_next(ctx, prev, new_env)
        else:
            self.set_slot(ctx, node, c, DATA, new_env)
        self.data_alloc.free(env, ctx)

    def remove(self, ctx: OpCtx, key: bytes, hkey: bytes) -> bool:
        node, d, c, kind, head = self.descend(ctx, hkey)
        if kind == EMPTY:
            ctx.unlock(node)
            return False
        prev = NULL
        env = head
        while env != NULL:
            rh, ks, vs, nxt = self.rec_meta(ctx, env)
            if rh == hkey and ks == len(key) and self.rec_key(ctx, env, ks) == key:
                break
            prev = env
            env = nxt
        else:
            ctx.unlock(node)
            return False
        ctx.upgrade(node)
        if prev != NULL:
            self.set_next(ctx, prev, nxt)
        elif nxt != NULL:
            self.set_slot(ctx, node, c, DATA, nxt)
        else:
            self.set_slot(ctx, node, c, EMPTY, NULL)
        self.data_alloc.free(env, ctx)
        if prev == NULL and nxt == NULL:
            node = self._merge_up(ctx, node, d, hkey)
        ctx.unlock(node)
        return True

    def _merge_up(self, ctx: OpCtx, node: int, d: int, hkey: bytes) -> int:
        """Dissolve emptied nodes and float a lone chain toward the root.

        Only data chains move; a node with a surviving node child stays, as
        interior positions encode digest prefix depth.  Requires the whole
        path to be write-locked (delete mode).  Returns the node the caller
        is left holding.
        """
        reader = keyhash.char_reader(hkey, self.b)
        while node != self.root:
            count, _, kind2, val2 = self.occupied_slots(ctx, node)
            if count >= 2 or (count == 1 and kind2 == TREE):
                break
            parent = self.parent_of(ctx, node)
            pc = reader(d - 1)
            if count == 0:
                self.set_slot(ctx, parent, pc, EMPTY, NULL)
            else:
                self.set_slot(ctx, parent, pc, DATA, val2)
            self.node_alloc.free(node, ctx)
            ctx.unlock(node)
            node = parent
            d -= 1
        return node

    # -- reluctant splitting -------------------------------------------------

    def _separable(self, hashes, from_depth: int) -> bool:
        """Does any extractable character at depth >= from_depth differ?

        Digests that agree on every remaining character cannot be pushed
        apart, so splitting such a chain would only build a dead run.
        """
        for d in range(from_depth, self.max_chars):
            chars = {keyhash.char_at(h, d, self.b) for h in hashes}
            if len(chars) > 1:
                return True
        return False

    def _place_group(self, ctx: OpCtx, parent: int, pd: int, pc: int, records):
        """Attach records (all sharing digest characters 0..pd) under parent.

        Builds the minimal run of nodes until the digests separate into
        small enough chains, preserving the given chain order within each
        group.
        """
        nd = pd + 1
        hashes = {h for _, h in records}
        if len(hashes) <= self.s or not self._separable(hashes, nd):
            for i, (env, _) in enumerate(records):
                nxt = records[i + 1][0] if i + 1 < len(records) else NULL
                self.set_next(ctx, env, nxt)
            self.set_slot(ctx, parent, pc, DATA, records[0][0])
            return
        child = self.node_alloc.alloc(ctx)
        self.init_node(ctx, child, parent)
        self.set_slot(ctx, parent, pc, TREE, child)
        groups: dict[int, list] = {}
        for env, h in records:
            groups.setdefault(keyhash.char_at(h, nd, self.b), []).append((env, h))
        for gc, grp in groups.items():
            self._place_group(ctx, child, nd, gc, grp)

    # -- traversal -----------------------------------------------------------

    def walk(self, ctx: OpCtx, on_node=None, on_chain=None):
        """Depth-first pass over the whole structure (single-threaded use)."""
        child_struct = layout.U64
        stack = [(self.root, 0)]
        processed = 0
        while stack:
            processed += 1
            if processed % 256 == 0:
                ctx.finish()  # drop accumulated pins; addresses stay valid
            node, d = stack.pop()
            chd, dat = self.masks(ctx, node)
            mm, off = ctx.view(adr.SP_TRIE, node)
            cbase = off + self.nl.children_off
            m = chd
            while m:
                low = m & -m
                c = low.bit_length() - 1
                stack.append((child_struct.unpack_from(mm, cbase + 8 * c)[0], d + 1))
                m ^= low
            if on_chain is not None:
                m = dat
                while m:
                    low = m & -m
                    c = low.bit_length() - 1
                    head = child_struct.unpack_from(mm, cbase + 8 * c)[0]
                    on_chain(node, d, c, self.chain_entries(ctx, head))
                    m ^= low
            if on_node is not None:
                on_node(node, d, chd.bit_count(), dat.bit_count())
