"""Logical addresses: 64-bit packed segment/region/page/offset tuples.

Every space is a flat 64-bit byte-addressed universe backed by a series of
1 GiB segment files.  A logical address is simply the byte position inside
the space; the packed field layout falls out of the arithmetic:

    [ segment (34 bits) | region-in-segment (30-k bits) | page (k-12 bits) | offset (12 bits) ]

where 2**k is the configured region size.  Objects never span a region.
"""

from __future__ import annotations

PAGE_BITS = 12
PAGE_SIZE = 1 << PAGE_BITS
SEGMENT_BITS = 30
SEGMENT_SIZE = 1 << SEGMENT_BITS

REGION_BITS_MIN = 16
REGION_BITS_MAX = 24

NULL_ADDR = (1 << 64) - 1

# Space identifiers, also used as the WAL subrecord space byte.
SP_TRIE = 0
SP_TRIE_FREE = 1
SP_DATA = 2
SP_DATA_FREE = 3
SPACE_NAMES = ("trie", "trie_free", "data", "data_free")
NUM_SPACES = 4


def pack(segment: int, region: int, page: int, offset: int, region_bits: int) -> int:
    return (segment << SEGMENT_BITS) | (region << region_bits) | (page << PAGE_BITS) | offset


def unpack(addr: int, region_bits: int) -> tuple[int, int, int, int]:
    offset = addr & (PAGE_SIZE - 1)
    page = (addr >> PAGE_BITS) & ((1 << (region_bits - PAGE_BITS)) - 1)
    region = (addr >> region_bits) & ((1 << (SEGMENT_BITS - region_bits)) - 1)
    segment = addr >> SEGMENT_BITS
    return segment, region, page, offset


def field_limits(region_bits: int) -> tuple[int, int, int, int]:
    """Exclusive upper bounds of (segment, region, page, offset)."""
    return (
        1 << (64 - SEGMENT_BITS),
        1 << (SEGMENT_BITS - region_bits),
        1 << (region_bits - PAGE_BITS),
        PAGE_SIZE,
    )


def segment_of(addr: int) -> int:
    return addr >> SEGMENT_BITS


def segment_offset(addr: int) -> int:
    return addr & (SEGMENT_SIZE - 1)


def region_index(addr: int, region_bits: int) -> int:
    """Region index counting across all segments of a space."""
    return addr >> region_bits


def region_offset(addr: int, region_bits: int) -> int:
    return addr & ((1 << region_bits) - 1)


def region_start(addr: int, region_bits: int) -> int:
    return addr & ~((1 << region_bits) - 1)


def segment_filename(space: int, segment: int) -> str:
    return f"{SPACE_NAMES[space]}-{segment}.seg"
