"""Store configuration.

Structural fields (branching, sluggishness, region_bits, wal_chunk_size) are
frozen into the reserved header at creation and always win on reopen.
memory_budget, scan_limit and sync are runtime knobs a caller may override
per handle.
"""

from __future__ import annotations

from dataclasses import dataclass

from .addressing import REGION_BITS_MAX, REGION_BITS_MIN
from .errors import InvalidConfig

BRANCHINGS = (64, 128, 256)
SCAN_UNLIMITED = 0  # scan_limit value meaning "search the whole hole array"
SYNC_MODES = ("os", "fsync")


@dataclass
class StoreConfig:
    branching: int = 256          # child slots per tree node (b)
    sluggishness: int = 16        # max distinct hashes tolerated in one chain (s)
    region_bits: int = 20         # region size is 2**region_bits bytes
    memory_budget: int = 128      # max resident (mapped) regions across all spaces
    scan_limit: int = 100         # next-fit hole-scan bound; 0 = unlimited
    wal_chunk_size: int = 32768
    sync: str = "os"              # "os": buffered writes; "fsync": fsync before ack

    def validate(self) -> "StoreConfig":
        if self.branching not in BRANCHINGS:
            raise InvalidConfig(f"branching must be one of {BRANCHINGS}, got {self.branching}")
        if self.sluggishness < 1:
            raise InvalidConfig(f"sluggishness must be >= 1, got {self.sluggishness}")
        if not REGION_BITS_MIN <= self.region_bits <= REGION_BITS_MAX:
            raise InvalidConfig(
                f"region_bits must be in [{REGION_BITS_MIN}, {REGION_BITS_MAX}], got {self.region_bits}"
            )
        if self.memory_budget < 8:
            raise InvalidConfig(f"memory_budget must be >= 8 regions, got {self.memory_budget}")
        if self.scan_limit < 0:
            raise InvalidConfig("scan_limit must be >= 0 (0 means unlimited)")
        chunk = self.wal_chunk_size
        if chunk < 4096 or chunk & (chunk - 1):
            raise InvalidConfig(f"wal_chunk_size must be a power of two >= 4096, got {chunk}")
        if self.sync not in SYNC_MODES:
            raise InvalidConfig(f"sync must be one of {SYNC_MODES}, got {self.sync!r}")
        return self

    @property
    def region_size(self) -> int:
        return 1 << self.region_bits

    @property
    def char_bits(self) -> int:
        return self.branching.bit_length() - 1  # log2(b): 6, 7 or 8
