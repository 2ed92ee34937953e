"""Embedded persistent key-value store indexed by a hash trie.

Keys are mapped to 256-bit keyed digests and stored in an on-disk trie
with path compression and sluggish node splitting, laid out across four
memory-mapped spaces.  A redo-only write-ahead log makes single ops and
batches crash-atomic; per-node read-write locks let readers run in
parallel with each other.

>>> from triekv import Store, StoreConfig
>>> st = Store.create("/tmp/demo", StoreConfig(branching=128))
>>> st.put(b"answer", b"42")
'inserted'
>>> st.get(b"answer")
b'42'
>>> st.close()
"""

from .config import StoreConfig
from .errors import (
    BudgetExhausted,
    CorruptionError,
    InvalidArgument,
    InvalidConfig,
    StoreClosed,
    StoreError,
    StoreFailed,
    StoreLocked,
)
from .store import Store, WriteBatch

__version__ = "0.1.0"

__all__ = [
    "Store",
    "StoreConfig",
    "WriteBatch",
    "StoreError",
    "InvalidArgument",
    "InvalidConfig",
    "CorruptionError",
    "StoreClosed",
    "StoreFailed",
    "StoreLocked",
    "BudgetExhausted",
]
