"""Memory-mapped logical spaces.

Each of the four spaces is a flat byte universe stored in 1 GiB segment
files and mapped in power-of-two regions.  A region is always mapped fully
or not at all.  Maps are private (copy-on-write): nothing the kernel does
with a mapping ever reaches the files; durability flows exclusively through
the write-ahead pipeline, which receives a copy of every mutation.

A region with a nonzero pin count cannot be evicted.  A dirty region may
only be unmapped after its captured writes have been applied to the segment
files, which the eviction path enforces by invoking `flush_hook` (wired to
the disk worker's barrier by the store).
"""

from __future__ import annotations

import mmap
import os
import struct
import threading

from . import addressing as adr
from . import layout
from .errors import BudgetExhausted, CorruptionError

_U64 = struct.Struct("<Q")


class FdTable:
    """Open-once cache of segment file descriptors, shared with the disk worker."""

    def __init__(self, directory: str):
        self.directory = directory
        self._fds: dict[tuple[int, int], int] = {}
        self._mu = threading.Lock()

    def get(self, space: int, segment: int, create: bool = False) -> int:
        key = (space, segment)
        fd = self._fds.get(key)
        if fd is not None:
            return fd
        with self._mu:
            fd = self._fds.get(key)
            if fd is None:
                path = os.path.join(self.directory, adr.segment_filename(space, segment))
                flags = os.O_RDWR | (os.O_CREAT if create else 0)
                fd = os.open(path, flags, 0o644)
                self._fds[key] = fd
        return fd

    def fsync_all(self):
        with self._mu:
            fds = list(self._fds.values())
        for fd in fds:
            os.fsync(fd)

    def close_all(self):
        with self._mu:
            for fd in self._fds.values():
                os.close(fd)
            self._fds.clear()


class Region:
    __slots__ = ("space", "index", "mm", "pins", "stamp", "dirty", "aux")

    def __init__(self, space: int, index: int, mm: mmap.mmap):
        self.space = space
        self.index = index
        self.mm = mm
        self.pins = 0
        self.stamp = 0
        self.dirty = False
        self.aux = None  # lazily attached node-lock table (trie regions only)


class PinnedView:
    """A pinned window over one region; release() drops the pin."""

    def __init__(self, spaces: "SpaceManager", space: int, addr: int, size: int):
        self._spaces = spaces
        self.space = space
        self.addr = addr
        region = spaces.pin_addr(space, addr, size)
        off = adr.region_offset(addr, spaces.region_bits)
        self.mv = memoryview(region.mm)[off : off + size]

    def release(self):
        self.mv.release()
        self._spaces.unpin(self.space, self.addr >> self._spaces.region_bits)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.release()


class SpaceManager:
    def __init__(self, directory: str, region_bits: int, memory_budget: int, flush_hook=None):
        self.directory = directory
        self.region_bits = region_bits
        self.region_size = 1 << region_bits
        self.memory_budget = memory_budget
        self.flush_hook = flush_hook
        self.fdt = FdTable(directory)
        self.tails = [0] * adr.NUM_SPACES
        self.data_cursor = 0
        self._regions: dict[tuple[int, int], Region] = {}
        self._mu = threading.Lock()
        self._stamp = 0
        self._ensured: dict[tuple[int, int], int] = {}
        self.eviction_count = 0

    # -- region residency ----------------------------------------------------

    def pin_region(self, space: int, rg: int) -> Region:
        with self._mu:
            region = self._regions.get((space, rg))
            if region is None:
                region = self._map_locked(space, rg)
            region.pins += 1
            self._stamp += 1
            region.stamp = self._stamp
            return region

    def pin_addr(self, space: int, addr: int, size: int = 1) -> Region:
        rb = self.region_bits
        if addr + size > self.tails[space] or addr >> rb != (addr + size - 1) >> rb:
            raise CorruptionError(
                f"address 0x{addr:x}+{size} invalid for space {space} (tail 0x{self.tails[space]:x})"
            )
        return self.pin_region(space, addr >> rb)

    def unpin(self, space: int, rg: int):
        region = self._regions[(space, rg)]
        with self._mu:
            region.pins -= 1

    def _map_locked(self, space: int, rg: int) -> Region:
        while len(self._regions) >= self.memory_budget:
            self._evict_locked()
        segment = (rg << self.region_bits) >> adr.SEGMENT_BITS
        seg_off = (rg << self.region_bits) & (adr.SEGMENT_SIZE - 1)
        fd = self.fdt.get(space, segment)
        if os.fstat(fd).st_size < seg_off + self.region_size:
            raise CorruptionError(
                f"segment file for space {space} too short for region {rg}"
            )
        mm = mmap.mmap(
            fd,
            self.region_size,
            flags=mmap.MAP_PRIVATE,
            prot=mmap.PROT_READ | mmap.PROT_WRITE,
            offset=seg_off,
        )
        region = Region(space, rg, mm)
        self._regions[(space, rg)] = region
        return region

    def _evict_locked(self):
        victim = None
        for region in self._regions.values():
            if region.pins == 0 and (victim is None or region.stamp < victim.stamp):
                victim = region
        if victim is None:
            raise BudgetExhausted(
                f"all {len(self._regions)} resident regions are pinned; raise memory_budget"
            )
        if victim.dirty:
            # Unpinned regions only carry writes that were already submitted,
            # so one pipeline barrier makes the file copy current.
            if self.flush_hook is not None:
                self.flush_hook()
            for region in self._regions.values():
                if region.pins == 0:
                    region.dirty = False
        victim.mm.close()
        del self._regions[(victim.space, victim.index)]
        self.eviction_count += 1

    def resident_regions(self) -> int:
        return len(self._regions)

    # -- reads (caller holds a pin on the region) ----------------------------

    def view(self, space: int, addr: int):
        """(mmap, offset) pair for struct access within one region."""
        region = self._regions[(space, addr >> self.region_bits)]
        return region.mm, addr & (self.region_size - 1)

    def read(self, space: int, addr: int, n: int) -> bytes:
        mm, off = self.view(space, addr)
        return mm[off : off + n]

    def u64(self, space: int, addr: int) -> int:
        mm, off = self.view(space, addr)
        return _U64.unpack_from(mm, off)[0]

    def resolve(self, space: int, addr: int, n: int) -> PinnedView:
        return PinnedView(self, space, addr, n)

    # -- writes: memory image now, pipeline copy for the files ---------------

    def write(self, space: int, addr: int, data: bytes, vec: list):
        region = self._regions[(space, addr >> self.region_bits)]
        off = addr & (self.region_size - 1)
        region.mm[off : off + len(data)] = data
        region.dirty = True
        vec.append((space, addr, data))

    def write_u64(self, space: int, addr: int, value: int, vec: list):
        self.write(space, addr, _U64.pack(value), vec)

    # -- tails, cursor and header write-through ------------------------------

    def set_tail(self, space: int, value: int, vec: list):
        self.tails[space] = value
        self.write_u64(adr.SP_TRIE, layout.HDR_TAILS_OFF + 8 * space, value, vec)

    def set_cursor(self, value: int, vec: list):
        self.data_cursor = value
        self.write_u64(adr.SP_TRIE, layout.HDR_CURSOR_OFF, value, vec)

    def set_root(self, value: int, vec: list):
        self.write_u64(adr.SP_TRIE, layout.HDR_ROOT_OFF, value, vec)

    def load_header_state(self):
        """Read mutable header fields; trie region 0 must be pinned."""
        mm, off = self.view(adr.SP_TRIE, 0)
        root = _U64.unpack_from(mm, off + layout.HDR_ROOT_OFF)[0]
        self.tails = [
            _U64.unpack_from(mm, off + layout.HDR_TAILS_OFF + 8 * i)[0]
            for i in range(adr.NUM_SPACES)
        ]
        self.data_cursor = _U64.unpack_from(mm, off + layout.HDR_CURSOR_OFF)[0]
        return root

    # -- file growth ---------------------------------------------------------

    def ensure_region_file(self, space: int, rg: int):
        """Grow (zero-filled) the backing segment so region rg is fully mappable."""
        segment = (rg << self.region_bits) >> adr.SEGMENT_BITS
        seg_off = (rg << self.region_bits) & (adr.SEGMENT_SIZE - 1)
        need = seg_off + self.region_size
        key = (space, segment)
        known = self._ensured.get(key)
        if known is not None and known >= need:
            return
        fd = self.fdt.get(space, segment, create=True)
        if known is None:
            known = os.fstat(fd).st_size
        if known < need:
            os.ftruncate(fd, need)
            known = need
        self._ensured[key] = known

    def close(self):
        with self._mu:
            for region in self._regions.values():
                region.mm.close()
            self._regions.clear()
        self.fdt.close_all()


class OpCtx:
    """Per-operation region pins, write vector, and lock hooks.

    Pins are per region and held until `finish`, so every byte the
    operation read — and, crucially, every byte it wrote — stays mapped
    until the operation's writes have been handed to the disk pipeline.
    That upholds the eviction rule: an unpinned dirty region only ever
    carries writes a pipeline barrier can make durable.
    """

    couple = True  # release the parent's lock once the child's is held

    def __init__(self, sm: SpaceManager):
        self.sm = sm
        self.pins: dict[tuple[int, int], Region] = {}
        self.vec: list = []
        self._rb = sm.region_bits
        self._rmask = sm.region_size - 1

    def _region(self, space: int, addr: int) -> Region:
        key = (space, addr >> self._rb)
        region = self.pins.get(key)
        if region is None:
            region = self.sm.pin_region(space, key[1])
            self.pins[key] = region
        return region

    def view(self, space: int, addr: int):
        return self._region(space, addr).mm, addr & self._rmask

    def u64(self, space: int, addr: int) -> int:
        mm = self._region(space, addr).mm
        return _U64.unpack_from(mm, addr & self._rmask)[0]

    def write(self, space: int, addr: int, data: bytes):
        region = self._region(space, addr)
        off = addr & self._rmask
        region.mm[off : off + len(data)] = data
        region.dirty = True
        self.vec.append((space, addr, data))

    def write_u64(self, space: int, addr: int, value: int):
        self.write(space, addr, _U64.pack(value))

    def finish(self):
        for space, rg in self.pins:
            self.sm.unpin(space, rg)
        self.pins.clear()

    # lock hooks, overridden by the concurrent store
    def lock(self, addr: int, depth: int):
        pass

    def unlock(self, addr: int):
        pass

    def upgrade(self, addr: int):
        pass
