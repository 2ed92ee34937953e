"""Flat, C-compatible binding surface over opaque handles.

Shapes every store operation the way a C header would: free functions
taking an integer handle, byte buffers in and out, and negative integer
status codes instead of exceptions.  A ctypes/cffi shim can expose these
one-to-one to C callers; the Python API in :mod:`triekv.store` remains
the primary interface.

Status codes: 0 success (kv_put returns 0 inserted / 1 updated), negative
on error — see the ``ERR_*`` constants and :func:`kv_strerror`.  Handles
are positive integers; any stale or foreign handle maps to ``ERR_HANDLE``.
"""

from __future__ import annotations

import threading
from typing import Dict, List, Optional, Tuple, Union

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

__all__ = [
    "OK", "UPDATED", "ERR_INVALID", "ERR_NOT_FOUND", "ERR_CORRUPT",
    "ERR_LOCKED", "ERR_CLOSED", "ERR_FAILED", "ERR_BUDGET", "ERR_HANDLE",
    "ERR_IO", "kv_create", "kv_open", "kv_close", "kv_put", "kv_get",
    "kv_get_into", "kv_delete", "kv_flush", "kv_count", "kv_batch_begin",
    "kv_batch_put", "kv_batch_delete", "kv_batch_commit",
    "kv_batch_abandon", "kv_strerror", "kv_open_handles",
]

OK = 0
UPDATED = 1

ERR_INVALID = -1
ERR_NOT_FOUND = -2
ERR_CORRUPT = -3
ERR_LOCKED = -4
ERR_CLOSED = -5
ERR_FAILED = -6
ERR_BUDGET = -7
ERR_HANDLE = -8
ERR_IO = -9

_MESSAGES = {
    OK: "ok",
    ERR_INVALID: "invalid argument",
    ERR_NOT_FOUND: "not found",
    ERR_CORRUPT: "corrupt store",
    ERR_LOCKED: "store locked by another handle",
    ERR_CLOSED: "handle closed",
    ERR_FAILED: "store failed; reopen to recover",
    ERR_BUDGET: "memory budget exhausted",
    ERR_HANDLE: "bad handle",
    ERR_IO: "i/o error",
}

_mu = threading.Lock()
_next_id = 1
_stores: Dict[int, Store] = {}
_batches: Dict[int, Tuple[int, WriteBatch]] = {}   # batch handle -> (store handle, ops)


def _code_for(exc: Exception) -> int:
    if isinstance(exc, (InvalidArgument, InvalidConfig)):
        return ERR_INVALID
    if isinstance(exc, CorruptionError):
        return ERR_CORRUPT
    if isinstance(exc, StoreLocked):
        return ERR_LOCKED
    if isinstance(exc, StoreClosed):
        return ERR_CLOSED
    if isinstance(exc, StoreFailed):
        return ERR_FAILED
    if isinstance(exc, BudgetExhausted):
        return ERR_BUDGET
    if isinstance(exc, (StoreError, OSError)):
        return ERR_IO
    raise exc


def _path(path: Union[str, bytes]) -> str:
    return path.decode() if isinstance(path, bytes) else path


def _register(store: Store) -> int:
    global _next_id
    with _mu:
        h = _next_id
        _next_id += 1
        _stores[h] = store
    return h


def _store(handle: int) -> Optional[Store]:
    with _mu:
        return _stores.get(handle)


def kv_strerror(code: int) -> str:
    return _MESSAGES.get(code, f"unknown error {code}")


def kv_open_handles() -> int:
    with _mu:
        return len(_stores)


def kv_create(path: Union[str, bytes], branching: int = 0,
              sluggishness: int = 0, region_bits: int = 0,
              memory_budget: int = 0, scan_limit: int = -1,
              wal_chunk_size: int = 0, use_fsync: int = 0) -> int:
    """New store at path; zero / -1 arguments mean library defaults."""
    d = StoreConfig()
    try:
        cfg = StoreConfig(
            branching=branching or d.branching,
            sluggishness=sluggishness or d.sluggishness,
            region_bits=region_bits or d.region_bits,
            memory_budget=memory_budget or d.memory_budget,
            scan_limit=d.scan_limit if scan_limit < 0 else scan_limit,
            wal_chunk_size=wal_chunk_size or d.wal_chunk_size,
            sync="fsync" if use_fsync else "os",
        )
        return _register(Store.create(_path(path), cfg))
    except Exception as exc:
        return _code_for(exc)


def kv_open(path: Union[str, bytes], memory_budget: int = 0,
            scan_limit: int = -1, use_fsync: int = -1) -> int:
    try:
        st = Store.open(
            _path(path),
            memory_budget=memory_budget or None,
            scan_limit=None if scan_limit < 0 else scan_limit,
            sync=None if use_fsync < 0 else ("fsync" if use_fsync else "os"),
        )
        return _register(st)
    except Exception as exc:
        return _code_for(exc)


def kv_close(handle: int) -> int:
    with _mu:
        st = _stores.pop(handle, None)
        dead = [bh for bh, (sh, _) in _batches.items() if sh == handle]
        for bh in dead:
            del _batches[bh]
    if st is None:
        return ERR_HANDLE
    try:
        st.close()
        return OK
    except Exception as exc:
        return _code_for(exc)


def kv_put(handle: int, key: bytes, value: bytes) -> int:
    st = _store(handle)
    if st is None:
        return ERR_HANDLE
    try:
        return UPDATED if st.put(key, value) == "updated" else OK
    except Exception as exc:
        return _code_for(exc)


def kv_get(handle: int, key: bytes) -> Union[bytes, int]:
    """Value bytes, or a negative status (ERR_NOT_FOUND when absent)."""
    st = _store(handle)
    if st is None:
        return ERR_HANDLE
    try:
        value = st.get(key)
    except Exception as exc:
        return _code_for(exc)
    return ERR_NOT_FOUND if value is None else value


def kv_get_into(handle: int, key: bytes, out: bytearray) -> int:
    """C-style read: returns the value size, filling as much of ``out``
    as fits.  A return larger than len(out) means the caller's buffer was
    too small (contents of ``out`` are the value's prefix)."""
    st = _store(handle)
    if st is None:
        return ERR_HANDLE
    try:
        value = st.get(key)
    except Exception as exc:
        return _code_for(exc)
    if value is None:
        return ERR_NOT_FOUND
    n = min(len(value), len(out))
    out[:n] = value[:n]
    return len(value)


def kv_delete(handle: int, key: bytes) -> int:
    st = _store(handle)
    if st is None:
        return ERR_HANDLE
    try:
        return OK if st.delete(key) else ERR_NOT_FOUND
    except Exception as exc:
        return _code_for(exc)


def kv_flush(handle: int) -> int:
    st = _store(handle)
    if st is None:
        return ERR_HANDLE
    try:
        st.flush()
        return OK
    except Exception as exc:
        return _code_for(exc)


def kv_count(handle: int) -> int:
    st = _store(handle)
    if st is None:
        return ERR_HANDLE
    try:
        return st.count()
    except Exception as exc:
        return _code_for(exc)


def kv_batch_begin(handle: int) -> int:
    global _next_id
    with _mu:
        if handle not in _stores:
            return ERR_HANDLE
        bh = _next_id
        _next_id += 1
        _batches[bh] = (handle, WriteBatch())
    return bh


def _batch(bh: int) -> Optional[Tuple[int, WriteBatch]]:
    with _mu:
        return _batches.get(bh)


def kv_batch_put(bh: int, key: bytes, value: bytes) -> int:
    entry = _batch(bh)
    if entry is None:
        return ERR_HANDLE
    entry[1].put(key, value)
    return OK


def kv_batch_delete(bh: int, key: bytes) -> int:
    entry = _batch(bh)
    if entry is None:
        return ERR_HANDLE
    entry[1].delete(key)
    return OK


def kv_batch_commit(bh: int) -> int:
    with _mu:
        entry = _batches.pop(bh, None)
        st = _stores.get(entry[0]) if entry else None
    if entry is None:
        return ERR_HANDLE
    if st is None:
        return ERR_CLOSED
    try:
        st.write(entry[1])
        return OK
    except Exception as exc:
        return _code_for(exc)


def kv_batch_abandon(bh: int) -> int:
    with _mu:
        return OK if _batches.pop(bh, None) is not None else ERR_HANDLE
