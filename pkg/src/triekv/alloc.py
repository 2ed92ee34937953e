"""Allocators for the trie and data spaces.

Tree nodes are fixed-size slots handed out from the trie-space tail and
recycled through a LIFO stack of addresses living in the trie-free-list
space.  Data envelopes are variable-sized; freed ones are tracked by an
unsorted descriptor array in the data-free-list space, searched next-fit
from a persistent wrap-around cursor with a bounded number of probes.
Adjacent holes are always coalesced on free, so no two holes ever touch.

All reads and writes go through the caller's operation context, so every
region an allocation touches stays pinned until the operation's write
vector reaches the disk pipeline.  Space-internal locks here are leaf
locks: they are taken after any node locks a caller holds and never wait
on anything else.
"""

from __future__ import annotations

import threading

from . import addressing as adr
from .addressing import SP_DATA, SP_DATA_FREE, SP_TRIE, SP_TRIE_FREE
from .errors import CorruptionError, InvalidArgument
from .layout import (
    DESC_ENTRY,
    DESC_STRUCT,
    ENV_HDR_STRUCT,
    ENV_MIN_BODY,
    ENV_OVERHEAD,
    FREE_ENTRY,
    NO_DESC,
    ST_FREE,
    ST_USED,
    U32,
    NodeLayout,
    aligned_need,
)
from .spaces import OpCtx, SpaceManager


class TrieNodeAllocator:
    def __init__(self, spaces: SpaceManager, node_layout: NodeLayout):
        self.spaces = spaces
        self.nl = node_layout
        self.lock = threading.Lock()
        self.in_use = self.total_slots(spaces.tails[SP_TRIE]) - (
            spaces.tails[SP_TRIE_FREE] // FREE_ENTRY
        )

    def total_slots(self, tail: int) -> int:
        """Node slots carved out of the trie space below `tail`."""
        if tail <= adr.PAGE_SIZE:
            return 0
        rsize = self.spaces.region_size
        full_regions = tail >> self.spaces.region_bits
        n = sum(self.nl.slots_in_region(r, rsize) for r in range(full_regions))
        off = tail & (rsize - 1)
        if off:
            n += (off - self.nl.region_base(full_regions)) // self.nl.node_size
        return n

    def alloc(self, ctx: OpCtx) -> int:
        """Pop a recycled slot, or carve a fresh one off the tail."""
        sp = self.spaces
        with self.lock:
            ft = sp.tails[SP_TRIE_FREE]
            if ft:
                top = ft - FREE_ENTRY
                addr = ctx.u64(SP_TRIE_FREE, top)
                sp.set_tail(SP_TRIE_FREE, top, ctx.vec)
            else:
                t = sp.tails[SP_TRIE]
                off = t & (sp.region_size - 1)
                if off + self.nl.node_size > sp.region_size:
                    t = (t - off) + sp.region_size  # slot would span; skip to next region
                addr = t
                sp.ensure_region_file(SP_TRIE, t >> sp.region_bits)
                sp.set_tail(SP_TRIE, t + self.nl.node_size, ctx.vec)
            self.in_use += 1
            return addr

    def free(self, addr: int, ctx: OpCtx):
        sp = self.spaces
        with self.lock:
            ft = sp.tails[SP_TRIE_FREE]
            sp.ensure_region_file(SP_TRIE_FREE, ft >> sp.region_bits)
            sp.set_tail(SP_TRIE_FREE, ft + FREE_ENTRY, ctx.vec)
            ctx.write_u64(SP_TRIE_FREE, ft, addr)
            self.in_use -= 1

    def free_depth(self) -> int:
        return self.spaces.tails[SP_TRIE_FREE] // FREE_ENTRY


class DataAllocator:
    def __init__(self, spaces: SpaceManager, scan_limit: int):
        self.spaces = spaces
        self.scan_limit = scan_limit  # 0 = search the whole descriptor array
        self.lock = threading.Lock()
        self.alloc_calls = 0
        self.recycled = 0

    # -- descriptor array helpers (caller holds self.lock) -------------------

    def _desc_count(self) -> int:
        return self.spaces.tails[SP_DATA_FREE] // DESC_ENTRY

    def _desc_read(self, ctx: OpCtx, idx: int) -> tuple[int, int]:
        mm, off = ctx.view(SP_DATA_FREE, idx * DESC_ENTRY)
        return DESC_STRUCT.unpack_from(mm, off)

    def _desc_write(self, ctx: OpCtx, idx: int, addr: int, size: int):
        ctx.write(SP_DATA_FREE, idx * DESC_ENTRY, DESC_STRUCT.pack(addr, size))

    def _desc_append(self, ctx: OpCtx, addr: int, size: int) -> int:
        sp = self.spaces
        tail = sp.tails[SP_DATA_FREE]
        idx = tail // DESC_ENTRY
        sp.ensure_region_file(SP_DATA_FREE, tail >> sp.region_bits)
        sp.set_tail(SP_DATA_FREE, tail + DESC_ENTRY, ctx.vec)
        self._desc_write(ctx, idx, addr, size)
        return idx

    def _desc_retire(self, ctx: OpCtx, idx: int):
        """Drop a descriptor by swapping the last entry into its slot."""
        sp = self.spaces
        last = self._desc_count() - 1
        if idx != last:
            laddr, lsize = self._desc_read(ctx, last)
            self._desc_write(ctx, idx, laddr, lsize)
            # fix the moved hole's back-reference
            ctx.write(SP_DATA, laddr + 8, U32.pack(idx))
        sp.set_tail(SP_DATA_FREE, last * DESC_ENTRY, ctx.vec)

    # -- envelope helpers ----------------------------------------------------

    def _write_envelope(self, ctx: OpCtx, addr: int, capacity: int, state: int, desc: int):
        ctx.write(SP_DATA, addr, ENV_HDR_STRUCT.pack(capacity, state, desc))
        ctx.write(SP_DATA, addr + 12 + capacity, U32.pack(capacity))

    def _env_header(self, ctx: OpCtx, addr: int) -> tuple[int, int, int]:
        mm, off = ctx.view(SP_DATA, addr)
        return ENV_HDR_STRUCT.unpack_from(mm, off)

    def env_header(self, addr: int) -> tuple[int, int, int]:
        """(capacity, state, desc) of the envelope at addr; caller pins."""
        mm, off = self.spaces.view(SP_DATA, addr)
        return ENV_HDR_STRUCT.unpack_from(mm, off)

    # -- allocation ----------------------------------------------------------

    def alloc(self, body_size: int, ctx: OpCtx) -> tuple[int, int]:
        """Return (envelope_addr, capacity); the envelope is marked in use."""
        need = aligned_need(body_size)
        cap = need - ENV_OVERHEAD
        sp = self.spaces
        if need > sp.region_size:
            raise InvalidArgument(
                f"object of {body_size} bytes cannot fit inside one region"
            )
        with self.lock:
            self.alloc_calls += 1
            count = self._desc_count()
            if count:
                steps = count if self.scan_limit == 0 else min(self.scan_limit, count)
                idx = sp.data_cursor % count
                for _ in range(steps):
                    haddr, hcap = self._desc_read(ctx, idx)
                    if hcap >= cap:
                        self.recycled += 1
                        got = self._take_hole(ctx, idx, haddr, hcap, cap)
                        sp.set_cursor((idx + 1) % max(self._desc_count(), 1), ctx.vec)
                        return haddr, got
                    idx += 1
                    if idx >= count:
                        idx = 0
                sp.set_cursor(idx % count, ctx.vec)
            return self._tail_alloc(ctx, need, cap)

    def _take_hole(self, ctx: OpCtx, idx: int, haddr: int, hcap: int, cap: int) -> int:
        if hcap - cap >= ENV_OVERHEAD + ENV_MIN_BODY:
            # split: trim our piece off the front, remainder keeps the descriptor
            rem_addr = haddr + ENV_OVERHEAD + cap
            rem_cap = hcap - cap - ENV_OVERHEAD
            self._desc_write(ctx, idx, rem_addr, rem_cap)
            self._write_envelope(ctx, rem_addr, rem_cap, ST_FREE, idx)
            self._write_envelope(ctx, haddr, cap, ST_USED, NO_DESC)
            return cap
        # take it whole; the slack stays inside the envelope
        self._desc_retire(ctx, idx)
        self._write_envelope(ctx, haddr, hcap, ST_USED, NO_DESC)
        return hcap

    def _tail_alloc(self, ctx: OpCtx, need: int, cap: int) -> tuple[int, int]:
        sp = self.spaces
        t = sp.tails[SP_DATA]
        off = t & (sp.region_size - 1)
        rem = sp.region_size - off
        if need > rem:
            # the region remainder becomes a hole (possibly zero-capacity)
            self._seal_remainder(ctx, t, rem)
            t = (t - off) + sp.region_size
        sp.ensure_region_file(SP_DATA, t >> sp.region_bits)
        sp.set_tail(SP_DATA, t + need, ctx.vec)
        self._write_envelope(ctx, t, cap, ST_USED, NO_DESC)
        return t, cap

    def _seal_remainder(self, ctx: OpCtx, addr: int, rem: int):
        if rem < ENV_OVERHEAD:
            raise CorruptionError("data tail misaligned; remainder below envelope overhead")
        sp = self.spaces
        sp.set_tail(SP_DATA, addr + rem, ctx.vec)
        region_lo = adr.region_start(addr, sp.region_bits)
        if addr > region_lo:
            # the envelope ending here may already be a hole; grow it
            # instead of leaving two holes touching
            mm, off = ctx.view(SP_DATA, addr - 4)
            lcap = U32.unpack_from(mm, off)[0]
            left = addr - ENV_OVERHEAD - lcap
            if left < region_lo:
                raise CorruptionError("envelope footer walked out of its region")
            lcap2, lstate, ldesc = self._env_header(ctx, left)
            if lstate == ST_FREE:
                if lcap2 != lcap:
                    raise CorruptionError("envelope header/footer size mismatch")
                self._desc_write(ctx, ldesc, left, lcap + rem)
                self._write_envelope(ctx, left, lcap + rem, ST_FREE, ldesc)
                return
        idx = self._desc_append(ctx, addr, rem - ENV_OVERHEAD)
        self._write_envelope(ctx, addr, rem - ENV_OVERHEAD, ST_FREE, idx)

    # -- release -------------------------------------------------------------

    def free(self, env_addr: int, ctx: OpCtx):
        sp = self.spaces
        with self.lock:
            cap, state, _ = self._env_header(ctx, env_addr)
            if state != ST_USED:
                raise CorruptionError(f"double free of envelope 0x{env_addr:x}")

            start, total = env_addr, cap
            left_desc = None
            region_lo = adr.region_start(env_addr, sp.region_bits)
            region_hi = region_lo + sp.region_size

            right = env_addr + ENV_OVERHEAD + cap
            if right < region_hi and right < sp.tails[SP_DATA]:
                rcap, rstate, rdesc = self._env_header(ctx, right)
                if rstate == ST_FREE:
                    self._desc_retire(ctx, rdesc)
                    total += ENV_OVERHEAD + rcap

            if env_addr > region_lo:
                mm, off = ctx.view(SP_DATA, env_addr - 4)
                lcap = U32.unpack_from(mm, off)[0]
                left = env_addr - ENV_OVERHEAD - lcap
                if left < region_lo:
                    raise CorruptionError("envelope footer walked out of its region")
                lcap2, lstate, ldesc = self._env_header(ctx, left)
                if lstate == ST_FREE:
                    if lcap2 != lcap:
                        raise CorruptionError("envelope header/footer size mismatch")
                    start = left
                    total += ENV_OVERHEAD + lcap
                    left_desc = ldesc

            if left_desc is not None:
                self._desc_write(ctx, left_desc, start, total)
                desc = left_desc
            else:
                desc = self._desc_append(ctx, start, total)
            self._write_envelope(ctx, start, total, ST_FREE, desc)

    def hole_stats(self) -> tuple[int, int]:
        """(hole_count, hole_body_bytes) from the descriptor array."""
        sp = self.spaces
        with self.lock:
            count = self._desc_count()
            total = 0
            for i in range(count):
                a = i * DESC_ENTRY
                sp.pin_addr(SP_DATA_FREE, a, DESC_ENTRY)
                mm, off = sp.view(SP_DATA_FREE, a)
                total += DESC_STRUCT.unpack_from(mm, off)[1]
                sp.unpin(SP_DATA_FREE, a >> sp.region_bits)
            return count, total
