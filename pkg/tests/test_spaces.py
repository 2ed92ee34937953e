import os

import pytest

from triekv import addressing as adr
from triekv.addressing import PAGE_SIZE, SP_DATA, SP_TRIE
from triekv.errors import BudgetExhausted, CorruptionError
from triekv.spaces import SpaceManager

RB = 16
RSIZE = 1 << RB


def make_spaces(tmp_path, budget=8, flush_hook=None):
    d = tmp_path / "sp"
    d.mkdir(exist_ok=True)
    sm = SpaceManager(str(d), region_bits=RB, memory_budget=budget, flush_hook=flush_hook)
    sm.ensure_region_file(SP_TRIE, 0)
    sm.pin_region(SP_TRIE, 0)
    sm.tails[SP_TRIE] = PAGE_SIZE
    return sm


def grow_data(sm, n_regions):
    for rg in range(n_regions):
        sm.ensure_region_file(SP_DATA, rg)
    sm.tails[SP_DATA] = n_regions * RSIZE


def apply_vec(sm, vec):
    """Synchronous stand-in for the disk pipeline: push captured writes to the files."""
    for space, addr, data in vec:
        fd = sm.fdt.get(space, adr.segment_of(addr), create=True)
        os.pwrite(fd, data, adr.segment_offset(addr))


def test_pin_refcounts_and_eviction_protection(tmp_path):
    sm = make_spaces(tmp_path, budget=8)
    grow_data(sm, 8)
    for rg in range(7):
        sm.pin_region(SP_DATA, rg)
    # 8 resident (incl. trie 0), all pinned: the next mapping cannot evict
    with pytest.raises(BudgetExhausted):
        sm.pin_region(SP_DATA, 7)
    sm.unpin(SP_DATA, 3)
    sm.pin_region(SP_DATA, 7)  # now region 3 is evictable
    assert sm.resident_regions() == 8
    assert (SP_DATA, 3) not in sm._regions
    sm.close()


def test_lru_order(tmp_path):
    sm = make_spaces(tmp_path, budget=4)
    grow_data(sm, 6)
    for rg in range(3):
        sm.pin_region(SP_DATA, rg)
        sm.unpin(SP_DATA, rg)
    sm.pin_region(SP_DATA, 0)  # refresh region 0
    sm.unpin(SP_DATA, 0)
    sm.pin_region(SP_DATA, 3)  # evicts region 1, the least recently used
    assert (SP_DATA, 1) not in sm._regions
    assert (SP_DATA, 0) in sm._regions
    sm.close()


def test_private_mapping_defers_file_writes(tmp_path):
    sm = make_spaces(tmp_path)
    grow_data(sm, 1)
    sm.pin_region(SP_DATA, 0)
    vec = []
    sm.write(SP_DATA, 100, b"hello spaces", vec)
    assert sm.read(SP_DATA, 100, 12) == b"hello spaces"
    assert vec == [(SP_DATA, 100, b"hello spaces")]
    fd = sm.fdt.get(SP_DATA, 0)
    assert os.pread(fd, 12, 100) == b"\x00" * 12  # image changed, file did not
    apply_vec(sm, vec)
    assert os.pread(fd, 12, 100) == b"hello spaces"
    sm.close()


def test_eviction_flushes_dirty_regions_and_remap_sees_data(tmp_path):
    pending = []
    flushed = []

    sm = make_spaces(tmp_path, budget=4)

    def hook():
        flushed.append(len(pending))
        for vec in pending:
            apply_vec(sm, vec)
        pending.clear()

    sm.flush_hook = hook
    grow_data(sm, 6)
    sm.pin_region(SP_DATA, 0)
    vec = []
    sm.write(SP_DATA, 5, b"durable?", vec)
    pending.append(vec)
    sm.unpin(SP_DATA, 0)  # submitted-then-unpinned, per the write protocol
    for rg in range(1, 5):
        sm.pin_region(SP_DATA, rg)
        sm.unpin(SP_DATA, rg)
    assert flushed, "dirty eviction must have triggered the flush hook"
    assert (SP_DATA, 0) not in sm._regions
    sm.pin_region(SP_DATA, 0)
    assert sm.read(SP_DATA, 5, 8) == b"durable?"
    sm.close()


def test_object_must_not_span_regions(tmp_path):
    sm = make_spaces(tmp_path)
    grow_data(sm, 2)
    sm.pin_addr(SP_DATA, RSIZE - 16, 16)  # flush against the boundary: fine
    with pytest.raises(CorruptionError):
        sm.pin_addr(SP_DATA, RSIZE - 16, 17)


def test_resolve_beyond_tail_is_corruption(tmp_path):
    sm = make_spaces(tmp_path)
    grow_data(sm, 1)
    sm.tails[SP_DATA] = 4096
    with pytest.raises(CorruptionError):
        sm.pin_addr(SP_DATA, 4090, 16)
    sm.close()


def test_ensure_region_file_zero_fills(tmp_path):
    sm = make_spaces(tmp_path)
    sm.ensure_region_file(SP_DATA, 2)
    fd = sm.fdt.get(SP_DATA, 0)
    assert os.fstat(fd).st_size == 3 * RSIZE
    assert os.pread(fd, 64, 2 * RSIZE + 500) == b"\x00" * 64
    sm.close()


def test_resolve_view_roundtrip(tmp_path):
    sm = make_spaces(tmp_path)
    grow_data(sm, 1)
    vec = []
    sm.pin_region(SP_DATA, 0)
    sm.write(SP_DATA, 40, b"abcdef", vec)
    sm.unpin(SP_DATA, 0)
    with sm.resolve(SP_DATA, 40, 6) as h:
        assert bytes(h.mv) == b"abcdef"
    assert sm._regions[(SP_DATA, 0)].pins == 0
    sm.close()


def test_tail_writethrough_lands_in_header(tmp_path):
    sm = make_spaces(tmp_path)
    vec = []
    sm.set_tail(SP_DATA, 12345, vec)
    from triekv import layout

    assert sm.tails[SP_DATA] == 12345
    space, addr, data = vec[0]
    assert space == SP_TRIE
    assert addr == layout.HDR_TAILS_OFF + 8 * SP_DATA
    assert int.from_bytes(data, "little") == 12345
    sm.close()
