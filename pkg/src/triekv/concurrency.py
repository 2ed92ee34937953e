"""Locking primitives for concurrent tree access.

Each resident trie region carries its own node-lock table, created lazily
and discarded whole when the region is evicted.  Within a table, a node's
lock state is initialized exactly once per residency, on first contact,
no matter how many threads race to it; `init_count` records those first
contacts.  Discarding with the region is legal because a thread always
pins a region before locking into it, so an evictable region (zero pins)
has no holders and no waiters.

A node lock distinguishes:

  * readers      — shared; hand-over-hand descent for lookups
  * an owner     — at most one; compatible with readers until upgraded
  * a writer     — the upgraded owner; excludes readers while mutating

Upgrading blocks new readers and waits for existing ones to drain.
Safety against mid-descent structure changes comes from the coupling
protocol, not the table: a descending thread holds the parent's lock
while taking the child's, and mutators only free or rewrite what they
have write-locked, so a frontier argument rules out both deadlock and
use-after-free.

The shared/exclusive lock is the store-wide coordination gate: routine
operations hold it shared, while whole-tree passes and multi-operation
batches take it exclusively, so no reader can observe a half-applied
batch or a tree mid-walk.
"""

from __future__ import annotations

import threading


class _NodeEntry:
    __slots__ = ("readers", "owner", "writer", "pending")

    def __init__(self):
        self.readers = 0
        self.owner = False    # upgradable holder present
        self.writer = False   # owner has upgraded
        self.pending = False  # upgrade waiting: stall new readers


class NodeLockTable:
    """Node locks for one resident region, initialized on first contact."""

    def __init__(self):
        self._mu = threading.Lock()
        self._cv = threading.Condition(self._mu)
        self._entries: dict[int, _NodeEntry] = {}
        self.init_count = 0

    def _entry(self, addr: int) -> _NodeEntry:
        ent = self._entries.get(addr)
        if ent is None:
            ent = self._entries[addr] = _NodeEntry()
            self.init_count += 1
        return ent

    def acquire_read(self, addr: int):
        with self._cv:
            ent = self._entry(addr)
            while ent.writer or ent.pending:
                self._cv.wait()
            ent.readers += 1

    def release_read(self, addr: int):
        with self._cv:
            self._entries[addr].readers -= 1
            self._cv.notify_all()

    def acquire_owner(self, addr: int):
        """Take the upgradable slot; readers may continue underneath."""
        with self._cv:
            ent = self._entry(addr)
            while ent.owner:
                self._cv.wait()
            ent.owner = True

    def upgrade(self, addr: int):
        """Owner becomes writer once current readers drain; new readers stall."""
        with self._cv:
            ent = self._entries[addr]
            ent.pending = True
            while ent.readers:
                self._cv.wait()
            ent.writer = True
            ent.pending = False

    def acquire_write(self, addr: int):
        with self._cv:
            ent = self._entry(addr)
            while ent.owner:
                self._cv.wait()
            ent.owner = True
            ent.pending = True
            while ent.readers:
                self._cv.wait()
            ent.writer = True
            ent.pending = False

    def release_owner(self, addr: int):
        with self._cv:
            ent = self._entries[addr]
            ent.owner = False
            ent.writer = False
            ent.pending = False
            self._cv.notify_all()

    def held(self) -> int:
        """Number of nodes with an active holder (diagnostics)."""
        with self._mu:
            return sum(1 for e in self._entries.values() if e.readers or e.owner)


class SharedExclusiveLock:
    """Many shared holders or one exclusive; exclusive requests get priority."""

    def __init__(self):
        self._mu = threading.Lock()
        self._cv = threading.Condition(self._mu)
        self._shared = 0
        self._exclusive = False
        self._want_exclusive = 0

    def acquire_shared(self):
        with self._cv:
            while self._exclusive or self._want_exclusive:
                self._cv.wait()
            self._shared += 1

    def release_shared(self):
        with self._cv:
            self._shared -= 1
            if self._shared == 0:
                self._cv.notify_all()

    def acquire_exclusive(self):
        with self._cv:
            self._want_exclusive += 1
            while self._exclusive or self._shared:
                self._cv.wait()
            self._want_exclusive -= 1
            self._exclusive = True

    def release_exclusive(self):
        with self._cv:
            self._exclusive = False
            self._cv.notify_all()

    def __enter__(self):
        self.acquire_exclusive()
        return self

    def __exit__(self, *exc):
        self.release_exclusive()
