"""Embedded persistent key-value store.

A store is a directory: segment files for the four logical spaces, a
write-ahead log, and a lockfile guarding single-process access.  All
structural state — tree nodes, record envelopes, free lists, the mutable
header (root, space tails, allocation cursor) — lives in the spaces and is
reached through copy-on-write mappings.  Mutations update the mapped image
immediately and emit a write vector that the disk worker logs as one record
and then applies to the files, so every operation is atomic across crashes:
recovery replays whole logged records and discards a torn tail.

An operation returns once its record is in the log (buffered in "os" sync
mode, fsynced in "fsync" mode).  Readers run in parallel against the
mapped image using hand-over-hand node locks; a mutating operation holds
the store's writer slot for its whole critical section, which keeps the
header write-through values in its log records monotone, and takes
per-node locks only to stay invisible to concurrent readers: upgradable
locks down the path for puts (upgraded at the mutated node), full-path
write locks for deletes so a chain can float rootward without lock-order
inversion.  Multi-operation writes and whole-tree walks take the store
gate exclusively instead; they see and leave a quiescent tree, and a batch
becomes a single log record, atomic and invisible in the making.

A failure after an operation has begun mutating the mapped image poisons
the handle: the image can no longer be trusted to match the log, so every
later call raises and the process should reopen the store, which replays
the log into a clean image.
"""

from __future__ import annotations

import fcntl
import os
import threading

from . import addressing as adr
from . import keyhash, layout, wal
from .addressing import SP_TRIE
from .alloc import DataAllocator, TrieNodeAllocator
from .concurrency import NodeLockTable, SharedExclusiveLock
from .config import StoreConfig
from .errors import (
    CorruptionError,
    InvalidArgument,
    StoreClosed,
    StoreFailed,
    StoreLocked,
)
from .layout import NodeLayout
from .spaces import SpaceManager
from .trie import NULL, OpCtx, Trie

LOCKFILE = "store.lock"


class _LockedCtx(OpCtx):
    """Pins a node's region, then locks the node in that region's table.

    Pin-before-lock means a region with any holder or waiter is never
    evictable, so its lock table (discarded on eviction) cannot change
    epoch under an outstanding guard.
    """

    def __init__(self, sm, store: "Store"):
        super().__init__(sm)
        self.store = store
        self.locks: dict[int, NodeLockTable] = {}

    def table_for(self, addr: int) -> NodeLockTable:
        region = self._region(SP_TRIE, addr)
        tab = region.aux
        if tab is None:
            tab = self.store._install_table(region)
        return tab

    def unlock(self, addr: int):
        self.locks.pop(addr).release_owner(addr)

    def release_all(self):
        while self.locks:
            addr, tab = self.locks.popitem()
            tab.release_owner(addr)


class _ReadCtx(_LockedCtx):
    def lock(self, addr: int, depth: int):
        tab = self.table_for(addr)
        tab.acquire_read(addr)
        self.locks[addr] = tab

    def unlock(self, addr: int):
        self.locks.pop(addr).release_read(addr)

    def release_all(self):
        while self.locks:
            addr, tab = self.locks.popitem()
            tab.release_read(addr)


class _WriteCtx(_LockedCtx):
    """Upgradable-lock descent for single puts."""

    def lock(self, addr: int, depth: int):
        tab = self.table_for(addr)
        tab.acquire_owner(addr)
        self.locks[addr] = tab

    def upgrade(self, addr: int):
        self.locks[addr].upgrade(addr)


class _DeleteCtx(_LockedCtx):
    """Write-locks the whole path top-down so merges can climb freely."""

    couple = False

    def lock(self, addr: int, depth: int):
        tab = self.table_for(addr)
        tab.acquire_write(addr)
        self.locks[addr] = tab


class _PlainCtx(OpCtx):
    """No per-node locking; caller holds the store gate exclusively."""

    def release_all(self):
        pass


class WriteBatch:
    """Ordered group of operations applied as one atomic record."""

    def __init__(self):
        self.ops: list[tuple] = []

    def put(self, key: bytes, value: bytes) -> "WriteBatch":
        self.ops.append(("put", key, value))
        return self

    def delete(self, key: bytes) -> "WriteBatch":
        self.ops.append(("del", key))
        return self

    def __len__(self):
        return len(self.ops)


class Store:
    def __init__(self, directory: str, *, memory_budget: int | None = None,
                 scan_limit: int | None = None, sync: str | None = None,
                 _bootstrap: bool = False):
        seg0 = os.path.join(directory, adr.segment_filename(SP_TRIE, 0))
        if not os.path.exists(seg0):
            raise InvalidArgument(f"no store found in {directory!r}")
        self._lock_fd = os.open(os.path.join(directory, LOCKFILE),
                                os.O_RDWR | os.O_CREAT, 0o644)
        try:
            fcntl.flock(self._lock_fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError:
            os.close(self._lock_fd)
            raise StoreLocked(f"{directory!r} is in use by another handle") from None
        self._sm = None
        self._worker = None
        try:
            with open(seg0, "rb") as f:
                page = f.read(adr.PAGE_SIZE)
            cfg, seed = layout.parse_static_header(page)
            if memory_budget is not None:
                cfg.memory_budget = memory_budget
            if scan_limit is not None:
                cfg.scan_limit = scan_limit
            if sync is not None:
                cfg.sync = sync
            cfg.validate()
            self.directory = directory
            self.cfg = cfg
            self._seed = seed
            self._sm = SpaceManager(directory, cfg.region_bits, cfg.memory_budget)
            # replay any surviving log before the first region is mapped
            info = wal.recover(directory, cfg.wal_chunk_size, self._sm.fdt,
                               sync=cfg.sync == "fsync")
            self._worker = wal.DiskWorker(directory, self._sm.fdt, cfg.wal_chunk_size,
                                          cfg.sync, next_seq=info.next_seq)
            self._worker.start()
            self._sm.flush_hook = self._worker.barrier
            self._sm.pin_region(SP_TRIE, 0)   # held for the handle's lifetime
            root = self._sm.load_header_state()
            self._node_alloc = TrieNodeAllocator(self._sm, NodeLayout(cfg.branching))
            self._data_alloc = DataAllocator(self._sm, cfg.scan_limit)
            self._trie = Trie(self._sm, cfg, self._node_alloc, self._data_alloc)
            self._tables_mu = threading.Lock()
            self._gate = SharedExclusiveLock()
            self._write_mu = threading.Lock()
            self._life_mu = threading.Lock()
            self._failed = False
            self._closed = False
            if root == NULL:
                if not _bootstrap:
                    raise CorruptionError("store creation never completed (missing root)")
                root = self._bootstrap_root()
            self._trie.root = root
        except BaseException:
            if self._worker is not None:
                self._worker.stop()
            if self._sm is not None:
                self._sm.close()
            fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
            os.close(self._lock_fd)
            raise

    def _install_table(self, region) -> NodeLockTable:
        with self._tables_mu:
            if region.aux is None:
                region.aux = NodeLockTable()
            return region.aux

    def _bootstrap_root(self) -> int:
        ctx = _PlainCtx(self._sm)
        root = self._node_alloc.alloc(ctx)
        self._trie.init_node(ctx, root, NULL)
        self._sm.set_root(root, ctx.vec)
        ticket = self._worker.submit(ctx.vec)
        ctx.finish()
        ticket.wait()
        return root

    @classmethod
    def create(cls, directory: str, config: StoreConfig | None = None) -> "Store":
        """Initialise a fresh store in `directory` and return an open handle."""
        cfg = (config or StoreConfig()).validate()
        os.makedirs(directory, exist_ok=True)
        seg0 = os.path.join(directory, adr.segment_filename(SP_TRIE, 0))
        if os.path.exists(seg0):
            raise InvalidArgument(f"{directory!r} already holds a store")
        seed = keyhash.new_seed()
        page = bytearray(adr.PAGE_SIZE)
        hdr = layout.build_static_header(cfg, seed)
        page[: len(hdr)] = hdr
        layout.U64.pack_into(page, layout.HDR_ROOT_OFF, NULL)
        layout.U64.pack_into(page, layout.HDR_TAILS_OFF, adr.PAGE_SIZE)  # trie tail
        fd = os.open(seg0, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
        try:
            os.write(fd, page)
            os.ftruncate(fd, cfg.region_size)
            os.fsync(fd)
        finally:
            os.close(fd)
        return cls(directory, sync=cfg.sync, _bootstrap=True)

    @classmethod
    def open(cls, directory: str, **overrides) -> "Store":
        return cls(directory, **overrides)

    # -- lifecycle -----------------------------------------------------------

    def close(self):
        """Flush everything, write blocks back, truncate the log, release."""
        with self._life_mu:
            if self._closed:
                return
            self._closed = True
        self._worker.stop()
        self._sm.close()
        fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
        os.close(self._lock_fd)

    def abort(self):
        """Crash simulation: drop all volatile state without final writeback.

        Only what the pipeline already flushed — log records for every
        acknowledged operation, plus whatever block writeback happened to
        run — survives in the directory, exactly as after a process crash.
        """
        with self._life_mu:
            if self._closed:
                return
            self._closed = True
        self._worker.kill()
        self._sm.close()
        fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
        os.close(self._lock_fd)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _check_live(self):
        if self._closed:
            raise StoreClosed("store handle is closed")
        if self._failed:
            raise StoreFailed("store poisoned by an earlier failure; reopen to recover")

    def _validate_put(self, key: bytes, value: bytes):
        if not isinstance(value, (bytes, bytearray, memoryview)):
            raise InvalidArgument("value must be bytes-like")
        need = layout.aligned_need(layout.REC_FIXED + len(key) + len(value))
        if need > self.cfg.region_size:
            raise InvalidArgument(
                f"record needs {need} bytes; limit is one region ({self.cfg.region_size})"
            )

    # -- operations ----------------------------------------------------------

    def get(self, key: bytes) -> bytes | None:
        hkey = keyhash.hash_key(key, self._seed)
        self._gate.acquire_shared()
        try:
            self._check_live()
            ctx = _ReadCtx(self._sm, self)
            try:
                return self._trie.lookup(ctx, key, hkey)
            finally:
                ctx.release_all()
                ctx.finish()
        finally:
            self._gate.release_shared()

    def put(self, key: bytes, value: bytes) -> str:
        hkey = keyhash.hash_key(key, self._seed)
        self._validate_put(key, value)
        value = bytes(value)
        ticket = None
        self._gate.acquire_shared()
        try:
            self._check_live()
            with self._write_mu:
                ctx = _WriteCtx(self._sm, self)
                try:
                    result = self._trie.insert(ctx, key, hkey, value)
                    if ctx.vec:
                        ticket = self._worker.submit(ctx.vec)
                except BaseException:
                    if ctx.vec:
                        self._failed = True
                    raise
                finally:
                    ctx.release_all()
                    ctx.finish()
        finally:
            self._gate.release_shared()
        if ticket is not None:
            ticket.wait()
        return result

    def delete(self, key: bytes) -> bool:
        hkey = keyhash.hash_key(key, self._seed)
        ticket = None
        self._gate.acquire_shared()
        try:
            self._check_live()
            with self._write_mu:
                ctx = _DeleteCtx(self._sm, self)
                try:
                    found = self._trie.remove(ctx, key, hkey)
                    if ctx.vec:
                        ticket = self._worker.submit(ctx.vec)
                except BaseException:
                    if ctx.vec:
                        self._failed = True
                    raise
                finally:
                    ctx.release_all()
                    ctx.finish()
        finally:
            self._gate.release_shared()
        if ticket is not None:
            ticket.wait()
        return found

    def write(self, batch) -> list:
        """Apply a WriteBatch (or op-tuple iterable) as one atomic record.

        Results align with the batch: "inserted"/"updated" for puts, bool
        for deletes.  A batch pins every region it touches until it
        commits, so it must fit the memory budget; keep batches to at most
        a few hundred operations.
        """
        ops = batch.ops if isinstance(batch, WriteBatch) else list(batch)
        prepared = []
        for op in ops:
            if op[0] == "put":
                _, key, val = op
                hkey = keyhash.hash_key(key, self._seed)
                self._validate_put(key, val)
                prepared.append(("put", key, hkey, bytes(val)))
            elif op[0] == "del":
                _, key = op
                prepared.append(("del", key, keyhash.hash_key(key, self._seed), None))
            else:
                raise InvalidArgument(f"unknown batch op {op[0]!r}")
        ticket = None
        results = []
        self._gate.acquire_exclusive()
        try:
            self._check_live()
            with self._write_mu:
                ctx = _PlainCtx(self._sm)
                try:
                    for kind, key, hkey, val in prepared:
                        if kind == "put":
                            results.append(self._trie.insert(ctx, key, hkey, val))
                        else:
                            results.append(self._trie.remove(ctx, key, hkey))
                    if ctx.vec:
                        ticket = self._worker.submit(ctx.vec)
                except BaseException:
                    if ctx.vec:
                        self._failed = True
                    raise
                finally:
                    ctx.finish()
        finally:
            self._gate.release_exclusive()
        if ticket is not None:
            ticket.wait()
        return results

    # -- whole-store passes --------------------------------------------------

    def for_each(self, fn):
        """Call fn(key, value) for every record, in digest order groups."""
        self._gate.acquire_exclusive()
        try:
            self._check_live()
            ctx = _PlainCtx(self._sm)
            trie = self._trie

            def on_chain(node, d, c, entries):
                for env, _, ks, vs, _ in entries:
                    fn(trie.rec_key(ctx, env, ks), trie.rec_value(ctx, env, ks, vs))

            try:
                trie.walk(ctx, on_chain=on_chain)
            finally:
                ctx.finish()
        finally:
            self._gate.release_exclusive()

    def items(self) -> list[tuple[bytes, bytes]]:
        out = []
        self.for_each(lambda k, v: out.append((k, v)))
        return out

    def count(self) -> int:
        n = 0

        def bump(k, v):
            nonlocal n
            n += 1

        self.for_each(bump)
        return n

    def flush(self):
        """Force the pipeline through: blocks written back, log pruned."""
        self._gate.acquire_shared()
        try:
            self._check_live()
            self._worker.barrier()
        finally:
            self._gate.release_shared()
