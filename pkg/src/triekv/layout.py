"""On-disk binary layouts (all integers little-endian).

Reserved header (first 4 KiB page of the trie space):

    0   magic           8s   "TRIEKV\\x00\\x01"
    8   version         u32
    12  branching       u32
    16  sluggishness    u32
    20  region_bits     u32
    24  scan_limit      u32  (0 = unlimited)
    28  wal_chunk       u32
    32  memory_budget   u32  (creation-time echo; runtime-overridable)
    36  seed            32s
    68  static_crc      u32  crc32 of bytes [0, 68)
    -- mutable, maintained through the write pipeline --
    72  root_addr       u64
    80  tails           4 x u64  (trie, trie_free, data, data_free)
    112 data_cursor     u64  (next-fit descriptor index)

Tree node (node_size = 16 + b//4 + 8*b bytes; 2128/1072/544 for b=256/128/64):

    0            parent       u64
    8            chd_mask     b/8 bytes
    8+b//8       data_mask    b/8 bytes  (subset of chd_mask; set = chain)
    8+b//4       children     b x u64
    ...          lock pad     u64  (volatile lock slot; meaningless on disk)

Data envelope (sizes are body capacities, always multiples of 16):

    0   size   u32   | header, 12 bytes
    4   state  u8    | 1 = in use, 2 = free
    5   pad    3x u8 |
    8   desc   u32   | descriptor index while free, else 0xFFFFFFFF
    12  body   <size bytes>
    ..  footer u32 = size

Data record, stored in an envelope body:

    0   hkey      32s
    32  key_size  u32
    36  val_size  u32
    40  next      u64   (next record in chain, or null)
    48  key bytes, then value bytes
"""

from __future__ import annotations

import struct
import zlib

from .addressing import PAGE_SIZE
from .config import StoreConfig
from .errors import CorruptionError

MAGIC = b"TRIEKV\x00\x01"
FORMAT_VERSION = 1

_STATIC = struct.Struct("<8s7I32s")
_STATIC_CRC_OFF = _STATIC.size            # 68
HDR_ROOT_OFF = _STATIC_CRC_OFF + 4        # 72
HDR_TAILS_OFF = HDR_ROOT_OFF + 8          # 80
HDR_CURSOR_OFF = HDR_TAILS_OFF + 32       # 112
HDR_MUTABLE_END = HDR_CURSOR_OFF + 8      # 120

U32 = struct.Struct("<I")
U64 = struct.Struct("<Q")
U64U64 = struct.Struct("<QQ")

# -- reserved header ---------------------------------------------------------


def build_static_header(cfg: StoreConfig, seed: bytes) -> bytes:
    body = _STATIC.pack(
        MAGIC,
        FORMAT_VERSION,
        cfg.branching,
        cfg.sluggishness,
        cfg.region_bits,
        cfg.scan_limit,
        cfg.wal_chunk_size,
        cfg.memory_budget,
        seed,
    )
    return body + U32.pack(zlib.crc32(body))


def parse_static_header(page: bytes) -> tuple[StoreConfig, bytes]:
    """Validate and decode the immutable header prefix -> (config, seed)."""
    if len(page) < HDR_MUTABLE_END:
        raise CorruptionError("reserved header page truncated")
    body = page[:_STATIC_CRC_OFF]
    (stored_crc,) = U32.unpack_from(page, _STATIC_CRC_OFF)
    if zlib.crc32(body) != stored_crc:
        raise CorruptionError("reserved header checksum mismatch")
    magic, version, b, s, rbits, scan, chunk, budget, seed = _STATIC.unpack(body)
    if magic != MAGIC:
        raise CorruptionError("bad magic; not a store directory")
    if version != FORMAT_VERSION:
        raise CorruptionError(f"unsupported format version {version}")
    cfg = StoreConfig(
        branching=b,
        sluggishness=s,
        region_bits=rbits,
        memory_budget=budget,
        scan_limit=scan,
        wal_chunk_size=chunk,
    ).validate()
    return cfg, seed


# -- tree node geometry ------------------------------------------------------


class NodeLayout:
    """Field offsets inside a tree node for a given branching factor."""

    def __init__(self, branching: int):
        self.branching = branching
        self.mask_bytes = branching // 8
        self.mask_words = self.mask_bytes // 8
        self.parent_off = 0
        self.chd_mask_off = 8
        self.data_mask_off = 8 + self.mask_bytes
        self.children_off = 8 + 2 * self.mask_bytes
        self.lock_pad_off = self.children_off + 8 * branching
        self.node_size = self.lock_pad_off + 8

    def child_off(self, c: int) -> int:
        return self.children_off + 8 * c

    def slots_in_region(self, region_index: int, region_size: int) -> int:
        usable = region_size - (PAGE_SIZE if region_index == 0 else 0)
        return usable // self.node_size

    def region_base(self, region_index: int) -> int:
        """Byte offset of slot 0 inside the region."""
        return PAGE_SIZE if region_index == 0 else 0

    def slot_of(self, addr: int, region_bits: int) -> int:
        """Region-local slot index of a node address (for the lock table)."""
        region = addr >> region_bits
        off = (addr & ((1 << region_bits) - 1)) - self.region_base(region)
        return off // self.node_size


# -- data envelopes ----------------------------------------------------------

ENV_HEADER = 12
ENV_FOOTER = 4
ENV_OVERHEAD = ENV_HEADER + ENV_FOOTER   # 16
ENV_MIN_BODY = 16                        # smallest remainder worth splitting off
ENV_ALIGN = 16

ST_USED = 1
ST_FREE = 2
NO_DESC = 0xFFFFFFFF

ENV_HDR_STRUCT = struct.Struct("<IBxxxI")     # size, state, desc


def env_total(capacity: int) -> int:
    return ENV_OVERHEAD + capacity


def aligned_need(body_size: int) -> int:
    """Whole-envelope bytes needed for a body, rounded to the 16-byte grain."""
    n = ENV_OVERHEAD + body_size
    return (n + ENV_ALIGN - 1) & ~(ENV_ALIGN - 1)


# -- data records ------------------------------------------------------------

REC_FIXED = 48
REC_META = struct.Struct("<32sIIQ")           # hkey, key_size, val_size, next
REC_SIZES = struct.Struct("<IIQ")             # key_size, val_size, next (at +32)


def record_bytes(hkey: bytes, key: bytes, value: bytes, nxt: int) -> bytes:
    return REC_META.pack(hkey, len(key), len(value), nxt) + key + value


# -- free-list entries -------------------------------------------------------

FREE_ENTRY = 8                                 # trie free list: u64 node address
DESC_ENTRY = 16                                # hole descriptor: u64 addr, u32 size, pad
DESC_STRUCT = struct.Struct("<QI4x")
