"""Write-ahead log and the disk pipeline.

Every mutation batch becomes one record: a sequence number, a list of
subrecords (space byte, 8-byte offset, length-prefixed payload) and a
checksum.  Records are packed back to back into fixed-size chunks; the log
is a single append-only file of chunks plus a tiny side file holding the
pruned head offset.

A single disk worker owns the log and the segment files.  It appends and
flushes the records for submitted batches, resolves each batch's durability
ticket, and only then applies the batch to its 4 KiB block cache, writing
dirty blocks back to the segment files in bulk.  Blocks are always (re)read
from the files, never from mapped memory, so the worker stays independent
of every in-process mapping.  Records whose blocks have been written back
are pruned; once the whole log is redundant it is truncated to zero.

Chunk tail protocol: new payload bytes are appended behind the tail chunk's
current fill first, and the 8-byte chunk header (crc, length, flags) is
rewritten afterwards in a single small write, headers in chunk order.  A
crash between the two leaves the old header describing the old, fully
valid payload, so acknowledged records never become torn retroactively.

Recovery scans chunks from the head, reassembles records, replays their
subrecords onto the segment files (idempotent byte writes) and stops at the
first torn record.  A damaged chunk followed by a valid one means real
corruption rather than a crash tail and is reported as such.

Subrecord length encoding: a type byte t with 0 < t < 0xFF is the length
itself; t == 0xFF is followed by a 16-bit length; t == 0x00 by a 64-bit
length.
"""

from __future__ import annotations

import os
import queue
import struct
import threading
import zlib
from dataclasses import dataclass

from . import addressing as adr
from .errors import CorruptionError, StoreFailed
from .spaces import FdTable

LOG_NAME = "wal.log"
SIDE_NAME = "wal.head"

CHUNK_HDR = 8
FLAG_CONTINUES = 1                # last record in this chunk spills into the next
CHUNK_HDR_STRUCT = struct.Struct("<IHBx")
REC_HDR = struct.Struct("<QI")    # seq, payload length
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
SUB_FIX = struct.Struct("<BQ")    # space, offset

BLOCK = 4096
GULP = 256                        # max batches drained per worker wakeup
FLUSH_BLOCK_LIMIT = 256           # dirty blocks that trigger a writeback
CACHE_BLOCK_LIMIT = 4096          # cached blocks kept across writebacks
TRUNC_THRESHOLD = 8 << 20         # unpruned bytes that force a writeback + prune

TEAR_ENV = "TRIEKV_WAL_TEAR_AT"   # crash harness: tear the log at this byte count


# -- codecs ------------------------------------------------------------------


def encode_subrecord(space: int, offset: int, payload: bytes) -> bytes:
    n = len(payload)
    head = SUB_FIX.pack(space, offset)
    if 0 < n < 0xFF:
        return head + bytes((n,)) + payload
    if n <= 0xFFFF:
        return head + b"\xff" + _U16.pack(n) + payload
    return head + b"\x00" + _U64.pack(n) + payload


def decode_subrecords(buf: bytes) -> list[tuple[int, int, bytes]]:
    pos = 0
    end = len(buf)
    out = []
    while pos < end:
        if pos + 10 > end:
            raise CorruptionError("truncated subrecord header")
        space, offset = SUB_FIX.unpack_from(buf, pos)
        t = buf[pos + 9]
        pos += 10
        if 0 < t < 0xFF:
            n = t
        elif t == 0xFF:
            if pos + 2 > end:
                raise CorruptionError("truncated subrecord length")
            n = _U16.unpack_from(buf, pos)[0]
            pos += 2
        else:
            if pos + 8 > end:
                raise CorruptionError("truncated subrecord length")
            n = _U64.unpack_from(buf, pos)[0]
            pos += 8
        if pos + n > end:
            raise CorruptionError("subrecord payload overruns record")
        out.append((space, offset, buf[pos : pos + n]))
        pos += n
    return out


def encode_record(seq: int, subrecords) -> bytes:
    payload = b"".join(encode_subrecord(s, o, p) for s, o, p in subrecords)
    head = REC_HDR.pack(seq, len(payload))
    return head + payload + _U32.pack(zlib.crc32(head + payload))


def chunk_header(payload: bytes, flags: int) -> bytes:
    crc = zlib.crc32(_U16.pack(len(payload)) + bytes((flags,)) + payload)
    return CHUNK_HDR_STRUCT.pack(crc, len(payload), flags)


# -- durability ticket -------------------------------------------------------


class Ticket:
    __slots__ = ("_ev", "err", "seq")

    def __init__(self):
        self._ev = threading.Event()
        self.err = None
        self.seq = 0

    def resolve(self, seq: int):
        self.seq = seq
        self._ev.set()

    def fail(self, err: BaseException):
        self.err = err
        self._ev.set()

    def wait(self):
        self._ev.wait()
        if self.err is not None:
            raise StoreFailed("write pipeline failed") from self.err


# -- side file ---------------------------------------------------------------


def write_side(path: str, head_offset: int):
    body = _U64.pack(head_offset)
    blob = body + _U32.pack(zlib.crc32(body))
    tmp = path + ".tmp"
    fd = os.open(tmp, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o644)
    try:
        os.write(fd, blob)
        os.fsync(fd)
    finally:
        os.close(fd)
    os.rename(tmp, path)


def read_side(path: str) -> int:
    try:
        with open(path, "rb") as f:
            blob = f.read()
    except FileNotFoundError:
        return 0
    if len(blob) != 12 or zlib.crc32(blob[:8]) != _U32.unpack_from(blob, 8)[0]:
        return 0
    return _U64.unpack_from(blob, 0)[0]


# -- chunked log file --------------------------------------------------------


class WalFile:
    def __init__(self, directory: str, chunk_size: int, sync: bool):
        self.path = os.path.join(directory, LOG_NAME)
        self.side_path = os.path.join(directory, SIDE_NAME)
        self.chunk_size = chunk_size
        self.cap = chunk_size - CHUNK_HDR
        self.sync = sync
        self.fd = os.open(self.path, os.O_RDWR | os.O_CREAT, 0o644)
        self.tail_chunk = 0
        self.tail_payload = bytearray()
        self.tail_fresh = True        # payload byte 0 of the open chunk starts a record
        self.tail_dirty = False
        self.head_chunk = 0
        self.last_complete_seq = 0
        # (chunk index, starts fresh, highest seq of a record ending in it)
        self.sealed: list[tuple[int, bool, int]] = []
        self._pending: list[tuple[int, bytes]] = []        # payload pwrites
        self._pending_headers: list[tuple[int, bytes]] = []  # sealed-chunk headers
        tear = os.environ.get(TEAR_ENV)
        self.tear_at = int(tear) if tear else None
        self._torn = 0

    def _write(self, off: int, data: bytes, atomic: bool):
        # every log write funnels through here so the crash harness can tear it
        if self.tear_at is not None:
            room = self.tear_at - self._torn
            if room < len(data):
                if not atomic and room > 0:
                    os.pwrite(self.fd, data[:room], off)
                os._exit(86)
            self._torn += len(data)
        os.pwrite(self.fd, data, off)

    def append(self, record: bytes, seq: int):
        """Place one record into the chunk stream; flush() hits the file."""
        mv = memoryview(record)
        pos = 0
        n = len(record)
        while pos < n:
            room = self.cap - len(self.tail_payload)
            if room == 0:
                self._seal(continues=True)
                continue
            take = min(room, n - pos)
            start = len(self.tail_payload)
            self.tail_payload += mv[pos : pos + take]
            self._pending.append(
                (self.tail_chunk * self.chunk_size + CHUNK_HDR + start, bytes(mv[pos : pos + take]))
            )
            self.tail_dirty = True
            pos += take
        self.last_complete_seq = seq
        if len(self.tail_payload) == self.cap:
            self._seal(continues=False)

    def _seal(self, continues: bool):
        flags = FLAG_CONTINUES if continues else 0
        self._pending_headers.append(
            (self.tail_chunk, chunk_header(bytes(self.tail_payload), flags))
        )
        self.sealed.append((self.tail_chunk, self.tail_fresh, self.last_complete_seq))
        self.tail_chunk += 1
        self.tail_payload = bytearray()
        self.tail_fresh = not continues
        self.tail_dirty = False

    def flush(self):
        for off, data in self._pending:
            self._write(off, data, atomic=False)
        self._pending.clear()
        for idx, hdr in self._pending_headers:
            self._write(idx * self.chunk_size, hdr, atomic=True)
        self._pending_headers.clear()
        if self.tail_dirty:
            self._write(
                self.tail_chunk * self.chunk_size,
                chunk_header(bytes(self.tail_payload), 0),
                atomic=True,
            )
            self.tail_dirty = False
        if self.sync:
            os.fsync(self.fd)

    # -- pruning -------------------------------------------------------------

    def prune(self, upto_seq: int):
        """Advance the head across sealed chunks whose records are all applied.

        The head may only land on a chunk that starts with a record header,
        so recovery can begin parsing there.
        """
        drop = 0
        running = 0
        for i, (_, _, last_end) in enumerate(self.sealed):
            running = max(running, last_end)
            if running > upto_seq:
                break
            nxt_fresh = self.sealed[i + 1][1] if i + 1 < len(self.sealed) else self.tail_fresh
            if nxt_fresh:
                drop = i + 1
        if drop:
            del self.sealed[:drop]
            self.head_chunk = self.sealed[0][0] if self.sealed else self.tail_chunk

    def fully_prunable(self, upto_seq: int) -> bool:
        return self.last_complete_seq <= upto_seq

    def truncate_all(self):
        # the side file must say "start at zero" before the old bytes vanish
        write_side(self.side_path, 0)
        os.ftruncate(self.fd, 0)
        self.tail_chunk = 0
        self.tail_payload = bytearray()
        self.tail_fresh = True
        self.tail_dirty = False
        self.head_chunk = 0
        self.sealed.clear()
        self._pending.clear()
        self._pending_headers.clear()

    def persist_head(self):
        write_side(self.side_path, self.head_chunk * self.chunk_size)

    def unpruned_bytes(self) -> int:
        live = (self.tail_chunk - self.head_chunk) * self.chunk_size
        if self.tail_payload:
            live += CHUNK_HDR + len(self.tail_payload)
        return live

    def size_bytes(self) -> int:
        """File extent including dead pruned chunks before the head."""
        size = self.tail_chunk * self.chunk_size
        if self.tail_payload:
            size += CHUNK_HDR + len(self.tail_payload)
        return size

    def close(self):
        os.close(self.fd)


# -- recovery ----------------------------------------------------------------


@dataclass
class RecoveryInfo:
    records: int = 0
    subrecords: int = 0
    bytes_scanned: int = 0
    next_seq: int = 1


def _read_chunk(fd, off: int, chunk_size: int):
    """Return the chunk's payload, or None if it fails validation."""
    raw = os.pread(fd, chunk_size, off)
    if len(raw) < CHUNK_HDR:
        return None, 0
    crc, length, flags = CHUNK_HDR_STRUCT.unpack_from(raw, 0)
    if length > chunk_size - CHUNK_HDR or CHUNK_HDR + length > len(raw):
        return None, 0
    payload = raw[CHUNK_HDR : CHUNK_HDR + length]
    if zlib.crc32(_U16.pack(length) + bytes((flags,)) + payload) != crc:
        return None, 0
    return payload, flags


def recover(directory: str, chunk_size: int, fdt: FdTable, sync: bool = False) -> RecoveryInfo:
    """Replay the log onto the segment files, then reset it to empty.

    Replaying is idempotent byte writes, so a crash anywhere inside recovery
    just means the next open replays again.
    """
    info = RecoveryInfo()
    log_path = os.path.join(directory, LOG_NAME)
    side_path = os.path.join(directory, SIDE_NAME)
    try:
        fd = os.open(log_path, os.O_RDWR)
    except FileNotFoundError:
        return info
    try:
        size = os.fstat(fd).st_size
        head = read_side(side_path)
        if head > size or head % chunk_size:
            head = 0
        payloads = []
        off = head
        bad_at = None
        while off < size:
            payload, _ = _read_chunk(fd, off, chunk_size)
            if payload is None:
                bad_at = off
                break
            payloads.append(payload)
            if len(payload) < chunk_size - CHUNK_HDR:
                # short chunk is an open tail; nothing may follow it
                off += chunk_size
                bad_at = off if off < size else None
                if bad_at is not None:
                    probe = bad_at
                    while probe < size:
                        p, _ = _read_chunk(fd, probe, chunk_size)
                        if p is not None:
                            raise CorruptionError("valid log chunk after the open tail")
                        probe += chunk_size
                    bad_at = None
                break
            off += chunk_size
        if bad_at is not None:
            probe = bad_at + chunk_size
            while probe < size:
                p, _ = _read_chunk(fd, probe, chunk_size)
                if p is not None:
                    raise CorruptionError("valid log chunk after a damaged one")
                probe += chunk_size
        buf = b"".join(payloads)
        info.bytes_scanned = size - head
        pos = 0
        last_seq = 0
        n = len(buf)
        while pos + REC_HDR.size <= n:
            seq, plen = REC_HDR.unpack_from(buf, pos)
            end = pos + REC_HDR.size + plen
            if end + 4 > n:
                break  # torn tail record
            if _U32.unpack_from(buf, end)[0] != zlib.crc32(buf[pos:end]):
                raise CorruptionError("log record checksum mismatch")
            if seq <= last_seq:
                raise CorruptionError("log record sequence went backwards")
            for space, soff, data in decode_subrecords(buf[pos + REC_HDR.size : end]):
                seg_fd = fdt.get(space, adr.segment_of(soff), create=True)
                os.pwrite(seg_fd, data, adr.segment_offset(soff))
                info.subrecords += 1
            last_seq = seq
            info.records += 1
            pos = end + 4
        info.next_seq = last_seq + 1
        if sync:
            fdt.fsync_all()
        if size:
            write_side(side_path, 0)
            os.ftruncate(fd, 0)
    finally:
        os.close(fd)
    return info


# -- disk worker -------------------------------------------------------------


class DiskWorker:
    """Single thread owning the log and all segment-file writes."""

    def __init__(self, directory: str, fdt: FdTable, chunk_size: int, sync_mode: str, next_seq: int = 1):
        self.fdt = fdt
        self.sync = sync_mode == "fsync"
        self.wal = WalFile(directory, chunk_size, self.sync)
        self.q: queue.Queue = queue.Queue(maxsize=1024)
        self.seq = next_seq - 1
        self.blocks: dict[tuple[int, int], bytearray] = {}
        self.dirty: set[tuple[int, int]] = set()
        self.applied_seq = 0
        self.flushed_seq = 0
        self.failed: BaseException | None = None
        self.hold_blocks = False  # debug: let the log grow by skipping writebacks
        self.block_writes = 0
        self._thread = threading.Thread(target=self._run, name="triekv-disk", daemon=True)

    def start(self):
        self._thread.start()

    def submit(self, vec: list[tuple[int, int, bytes]]) -> Ticket:
        t = Ticket()
        if self.failed is not None:
            t.fail(self.failed)
            return t
        self.q.put(("w", vec, t))
        return t

    def barrier(self):
        """Wait until all submitted batches are applied and written back."""
        if self.failed is not None:
            raise StoreFailed("write pipeline failed") from self.failed
        ev = threading.Event()
        self.q.put(("b", None, ev))
        ev.wait()
        if self.failed is not None:
            raise StoreFailed("write pipeline failed") from self.failed

    def stop(self):
        ev = threading.Event()
        self.q.put(("s", None, ev))
        ev.wait()
        self._thread.join()
        self.wal.close()

    def kill(self):
        """Crash simulation: exit without block writeback, pruning or truncation.

        The segment files keep only what earlier flushes wrote; everything
        newer survives solely as log records, as after a real crash.
        """
        ev = threading.Event()
        self.q.put(("k", None, ev))
        ev.wait()
        self._thread.join()
        self.wal.close()

    # -- worker side ---------------------------------------------------------

    def _run(self):
        while True:
            batch = [self.q.get()]
            while len(batch) < GULP:
                try:
                    batch.append(self.q.get_nowait())
                except queue.Empty:
                    break
            try:
                if self._process(batch):
                    return
            except BaseException as e:
                self.failed = e
                for kind, _, t in batch:
                    if kind == "w":
                        t.fail(e)
                    else:
                        t.set()
                self._drain_failed()
                return

    def _process(self, batch) -> bool:
        writes = [(vec, t) for kind, vec, t in batch if kind == "w"]
        barriers = [t for kind, _, t in batch if kind == "b"]
        stop = next((t for kind, _, t in batch if kind == "s"), None)
        kill = next((t for kind, _, t in batch if kind == "k"), None)
        pairs = []
        for vec, t in writes:
            self.seq += 1
            self.wal.append(encode_record(self.seq, vec), self.seq)
            pairs.append((self.seq, vec, t))
        if pairs:
            self.wal.flush()
        for seq, _, t in pairs:
            t.resolve(seq)
        for seq, vec, _ in pairs:
            self._apply(vec)
            self.applied_seq = seq
        force = bool(barriers) or stop is not None
        if force or len(self.dirty) >= FLUSH_BLOCK_LIMIT or self.wal.unpruned_bytes() >= TRUNC_THRESHOLD:
            self._flush_blocks(force=force)
        for ev in barriers:
            ev.set()
        if kill is not None:
            kill.set()
            return True
        if stop is not None:
            if self.wal.fully_prunable(self.flushed_seq):
                self.wal.truncate_all()
            stop.set()
            return True
        return False

    def _drain_failed(self):
        while True:
            kind, _, t = self.q.get()
            if kind == "w":
                t.fail(self.failed)
            elif kind == "b":
                t.set()
            else:
                t.set()
                return

    def _apply(self, vec):
        for space, off, data in vec:
            pos = 0
            n = len(data)
            while pos < n:
                blk = (off + pos) // BLOCK
                boff = (off + pos) % BLOCK
                take = min(BLOCK - boff, n - pos)
                key = (space, blk)
                block = self.blocks.get(key)
                if block is None:
                    block = self._read_block(space, blk)
                    self.blocks[key] = block
                block[boff : boff + take] = data[pos : pos + take]
                self.dirty.add(key)
                pos += take

    def _read_block(self, space: int, blk: int) -> bytearray:
        addr = blk * BLOCK
        fd = self.fdt.get(space, adr.segment_of(addr), create=True)
        raw = os.pread(fd, BLOCK, adr.segment_offset(addr))
        block = bytearray(BLOCK)
        block[: len(raw)] = raw
        return block

    def _flush_blocks(self, force: bool = False):
        if self.hold_blocks and not force:
            return
        if self.dirty:
            for key in sorted(self.dirty):
                space, blk = key
                addr = blk * BLOCK
                fd = self.fdt.get(space, adr.segment_of(addr), create=True)
                os.pwrite(fd, bytes(self.blocks[key]), adr.segment_offset(addr))
                self.block_writes += 1
            if self.sync:
                self.fdt.fsync_all()
            self.dirty.clear()
        self.flushed_seq = self.applied_seq
        if self.wal.fully_prunable(self.flushed_seq) and self.wal.size_bytes() >= TRUNC_THRESHOLD:
            self.wal.truncate_all()
        else:
            old_head = self.wal.head_chunk
            self.wal.prune(self.flushed_seq)
            if self.wal.head_chunk != old_head:
                self.wal.persist_head()
        if len(self.blocks) > CACHE_BLOCK_LIMIT:
            self.blocks.clear()
