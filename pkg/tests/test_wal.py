"""Log codecs, crash-tail recovery semantics, and the disk worker pipeline."""

import os
import shutil
import struct
import zlib

import pytest
from hypothesis import given, strategies as st

from triekv import addressing as adr
from triekv import wal
from triekv.errors import CorruptionError
from triekv.spaces import FdTable

from oracles import replay_subrecords

CHUNK = 4096
CAP = CHUNK - wal.CHUNK_HDR


def files_state(directory):
    """Segment files -> {space: {byte_offset: value}} for nonzero bytes."""
    out = {}
    for fn in os.listdir(directory):
        if not fn.endswith(".seg"):
            continue
        stem = fn[: -len(".seg")]
        space = None
        for sp, name in enumerate(adr.SPACE_NAMES):
            if stem.startswith(name + "-") and stem[len(name) + 1 :].isdigit():
                space, seg = sp, int(stem[len(name) + 1 :])
        assert space is not None, fn
        with open(os.path.join(directory, fn), "rb") as f:
            blob = f.read()
        base = seg * adr.SEGMENT_SIZE
        table = out.setdefault(space, {})
        for i, b in enumerate(blob):
            if b:
                table[base + i] = b
    return out


def assert_matches_oracle(directory, records):
    want = replay_subrecords(records)
    got = files_state(directory)
    for space, table in want.items():
        for off, val in table.items():
            have = got.get(space, {}).get(off, 0)
            assert have == val, (space, off, have, val)
    for space, table in got.items():
        for off, val in table.items():
            assert want.get(space, {}).get(off, 0) == val, (space, off, val)


# -- codecs ------------------------------------------------------------------


def test_subrecord_length_encodings():
    for n, extra in [(0, 3), (1, 1), (2, 1), (253, 1), (254, 1), (255, 3),
                     (256, 3), (65534, 3), (65535, 3), (65536, 9), (65537, 9)]:
        payload = bytes(i & 0xFF for i in range(n))
        blob = wal.encode_subrecord(2, 0x1234, payload)
        assert len(blob) == 9 + extra + n
        [(space, off, out)] = wal.decode_subrecords(blob)
        assert (space, off, out) == (2, 0x1234, payload)


@given(
    st.lists(
        st.tuples(
            st.integers(0, 3),
            st.integers(0, 2**40),
            st.binary(max_size=600),
        ),
        max_size=8,
    )
)
def test_subrecord_stream_roundtrip(subrecords):
    blob = b"".join(wal.encode_subrecord(s, o, p) for s, o, p in subrecords)
    assert wal.decode_subrecords(blob) == subrecords


def test_record_layout():
    subs = [(0, 8, b"ab"), (3, 99, b"")]
    blob = wal.encode_record(7, subs)
    seq, plen = wal.REC_HDR.unpack_from(blob, 0)
    assert seq == 7
    assert len(blob) == 12 + plen + 4
    assert struct.unpack_from("<I", blob, 12 + plen)[0] == zlib.crc32(blob[: 12 + plen])
    assert wal.decode_subrecords(blob[12 : 12 + plen]) == subs


def test_truncated_subrecord_raises():
    blob = wal.encode_subrecord(1, 5, b"hello")
    for cut in (3, 9, 12):
        with pytest.raises(CorruptionError):
            wal.decode_subrecords(blob[:cut])


# -- log file + recovery -----------------------------------------------------


def one_chunk_record(seq, space, off, fill):
    """A record that packs into exactly one 4096-byte chunk."""
    payload = bytes((fill,)) * 4060
    rec = wal.encode_record(seq, [(space, off, payload)])
    assert len(rec) == CAP
    return [(space, off, payload)], rec


def write_log(directory, records, chunk=CHUNK):
    wf = wal.WalFile(directory, chunk, sync=False)
    for seq, subs in enumerate(records, start=1):
        wf.append(wal.encode_record(seq, subs), seq)
    wf.flush()
    wf.close()


def test_recover_replays_and_resets(store_dir):
    records = [
        [(0, 0, b"hello"), (2, 4096, b"world")],
        [(1, 10, bytes(range(254)))],
        [(2, 4000, b"\xEE" * 70000)],            # spans many chunks, u64 length
        [(3, adr.SEGMENT_SIZE + 10, b"far")],     # second segment file
        [(0, 2, b"HEy")],                         # overwrites part of record 1
    ]
    write_log(store_dir, records)
    log_size = os.path.getsize(os.path.join(store_dir, wal.LOG_NAME))
    fdt = FdTable(store_dir)
    info = wal.recover(store_dir, CHUNK, fdt)
    fdt.close_all()
    assert info.records == 5
    assert info.next_seq == 6
    assert info.bytes_scanned == log_size
    assert_matches_oracle(store_dir, records)
    assert os.path.getsize(os.path.join(store_dir, wal.LOG_NAME)) == 0
    assert wal.read_side(os.path.join(store_dir, wal.SIDE_NAME)) == 0
    # the reset log recovers to nothing
    fdt = FdTable(store_dir)
    info2 = wal.recover(store_dir, CHUNK, fdt)
    fdt.close_all()
    assert info2.records == 0


def test_uncovered_tail_bytes_ignored(store_dir):
    records = [[(0, 0, b"alpha")], [(1, 50, b"beta")]]
    write_log(store_dir, records)
    # simulate a torn payload append past the header-covered prefix
    log = os.path.join(store_dir, wal.LOG_NAME)
    fd = os.open(log, os.O_RDWR)
    os.pwrite(fd, b"\xA5" * 300, os.path.getsize(log))
    os.close(fd)
    fdt = FdTable(store_dir)
    info = wal.recover(store_dir, CHUNK, fdt)
    fdt.close_all()
    assert info.records == 2
    assert_matches_oracle(store_dir, records)


def test_torn_last_chunk_dropped(store_dir):
    records = []
    recs = []
    for i in range(4):
        subs, _ = one_chunk_record(i + 1, 0, i * 8192, 0x10 + i)
        records.append(subs)
    write_log(store_dir, records)
    # garble a covered payload byte in the final chunk: crash tail, not corruption
    log = os.path.join(store_dir, wal.LOG_NAME)
    fd = os.open(log, os.O_RDWR)
    os.pwrite(fd, b"\x00", 3 * CHUNK + wal.CHUNK_HDR + 100)
    os.close(fd)
    fdt = FdTable(store_dir)
    info = wal.recover(store_dir, CHUNK, fdt)
    fdt.close_all()
    assert info.records == 3
    assert_matches_oracle(store_dir, records[:3])


def test_valid_chunk_after_damaged_is_corruption(store_dir):
    records = []
    for i in range(4):
        subs, _ = one_chunk_record(i + 1, 0, i * 8192, 0x20 + i)
        records.append(subs)
    write_log(store_dir, records)
    log = os.path.join(store_dir, wal.LOG_NAME)
    fd = os.open(log, os.O_RDWR)
    os.pwrite(fd, b"\x00\xFF", 1 * CHUNK + wal.CHUNK_HDR + 40)
    os.close(fd)
    fdt = FdTable(store_dir)
    with pytest.raises(CorruptionError):
        wal.recover(store_dir, CHUNK, fdt)
    fdt.close_all()


def test_valid_chunk_after_short_tail_is_corruption(store_dir):
    records = [[(0, 0, b"first")]]
    write_log(store_dir, records)  # one short (open) chunk
    payload = wal.encode_record(9, [(0, 512, b"ghost")])
    chunk = wal.chunk_header(payload, 0) + payload
    chunk += b"\x00" * (CHUNK - len(chunk))
    log = os.path.join(store_dir, wal.LOG_NAME)
    fd = os.open(log, os.O_RDWR)
    os.pwrite(fd, chunk, CHUNK)
    os.close(fd)
    fdt = FdTable(store_dir)
    with pytest.raises(CorruptionError):
        wal.recover(store_dir, CHUNK, fdt)
    fdt.close_all()


def test_record_spanning_chunks_torn(store_dir):
    r1 = [(0, 0, b"\x11" * 1000)]
    r2 = [(1, 0, b"\x22" * 6000)]  # spills into the second chunk
    write_log(store_dir, [r1, r2])
    log = os.path.join(store_dir, wal.LOG_NAME)
    assert os.path.getsize(log) > CHUNK
    with open(log, "rb+") as f:
        f.truncate(CHUNK)  # the spilled half never hit the disk
    fdt = FdTable(store_dir)
    info = wal.recover(store_dir, CHUNK, fdt)
    fdt.close_all()
    assert info.records == 1
    assert_matches_oracle(store_dir, [r1])


def test_sequence_regression_is_corruption(store_dir):
    payload = wal.encode_record(5, [(0, 0, b"x")]) + wal.encode_record(3, [(0, 8, b"y")])
    chunk = wal.chunk_header(payload, 0) + payload
    with open(os.path.join(store_dir, wal.LOG_NAME), "wb") as f:
        f.write(chunk)
    fdt = FdTable(store_dir)
    with pytest.raises(CorruptionError):
        wal.recover(store_dir, CHUNK, fdt)
    fdt.close_all()


def test_recovery_honors_pruned_head(store_dir):
    records = []
    for i in range(3):
        subs, _ = one_chunk_record(i + 1, 0, i * 8192, 0x30 + i)
        records.append(subs)
    fdt = FdTable(store_dir)
    worker = wal.DiskWorker(store_dir, fdt, CHUNK, "os")
    worker.start()
    try:
        worker.submit(records[0]).wait()
        worker.barrier()  # flush + prune: head moves past chunk 0
        worker.submit(records[1]).wait()
        worker.barrier()
        worker.submit(records[2]).wait()  # chunk 2 stays unpruned
        assert worker.wal.head_chunk == 2
        assert wal.read_side(os.path.join(store_dir, wal.SIDE_NAME)) == 2 * CHUNK
        copy = store_dir + "-copy"
        shutil.copytree(store_dir, copy)
    finally:
        worker.stop()
        fdt.close_all()
    fdt2 = FdTable(copy)
    info = wal.recover(copy, CHUNK, fdt2)
    fdt2.close_all()
    assert info.records == 1  # only the unpruned record is rescanned
    assert_matches_oracle(copy, records)


# -- disk worker -------------------------------------------------------------


def test_worker_pipeline_end_to_end(store_dir):
    records = []
    rng_off = 0
    for i in range(50):
        subs = [
            (i % 4, rng_off, bytes(((i + j) & 0xFF,)) * (1 + (i * 7 + j) % 90)
             ) for j in range(3)
        ]
        subs = [(s, o + k * 128, p) for k, (s, o, p) in enumerate(subs)]
        records.append(subs)
        rng_off += 512
    fdt = FdTable(store_dir)
    worker = wal.DiskWorker(store_dir, fdt, 32768, "os")
    worker.start()
    tickets = [worker.submit(r) for r in records]
    for i, t in enumerate(tickets):
        t.wait()
        assert t.seq == i + 1
    worker.barrier()
    assert worker.block_writes > 0
    worker.stop()
    fdt.close_all()
    # clean stop leaves an empty log; the files alone carry the state
    assert os.path.getsize(os.path.join(store_dir, wal.LOG_NAME)) == 0
    assert_matches_oracle(store_dir, records)


def test_worker_reads_blocks_from_files(store_dir):
    fdt = FdTable(store_dir)
    fd = fdt.get(adr.SP_TRIE, 0, create=True)
    os.pwrite(fd, b"\xAB" * wal.BLOCK, 7 * wal.BLOCK)
    worker = wal.DiskWorker(store_dir, fdt, 32768, "os")
    worker.start()
    worker.submit([(adr.SP_TRIE, 7 * wal.BLOCK + 100, b"xyz")]).wait()
    worker.barrier()
    worker.stop()
    blob = os.pread(fd, wal.BLOCK, 7 * wal.BLOCK)
    fdt.close_all()
    assert blob[:100] == b"\xAB" * 100
    assert blob[100:103] == b"xyz"
    assert blob[103:] == b"\xAB" * (wal.BLOCK - 103)


def test_acked_writes_survive_simulated_crash(store_dir):
    records = [[(2, i * 1000, bytes((i + 1,)) * 64)] for i in range(20)]
    fdt = FdTable(store_dir)
    worker = wal.DiskWorker(store_dir, fdt, 32768, "os")
    worker.hold_blocks = True  # keep everything in the log only
    worker.start()
    for r in records:
        worker.submit(r).wait()
    copy = store_dir + "-crash"
    shutil.copytree(store_dir, copy)  # the crash image: log present, blocks absent
    worker.stop()
    fdt.close_all()
    fdt2 = FdTable(copy)
    info = wal.recover(copy, 32768, fdt2)
    fdt2.close_all()
    assert info.records == 20
    assert_matches_oracle(copy, records)


def test_full_prune_truncates_but_keeps_data(store_dir, monkeypatch):
    monkeypatch.setattr(wal, "TRUNC_THRESHOLD", 4096)
    records = []
    for i in range(3):
        subs, _ = one_chunk_record(i + 1, 2, i * 8192, 0x40 + i)
        records.append(subs)
    fdt = FdTable(store_dir)
    worker = wal.DiskWorker(store_dir, fdt, CHUNK, "os")
    worker.start()
    for r in records:
        worker.submit(r).wait()
    worker.barrier()
    assert os.path.getsize(os.path.join(store_dir, wal.LOG_NAME)) == 0
    worker.stop()
    fdt.close_all()
    assert_matches_oracle(store_dir, records)
    fdt = FdTable(store_dir)
    assert wal.recover(store_dir, CHUNK, fdt).records == 0
    fdt.close_all()


def test_idempotent_double_replay(store_dir):
    records = [[(0, 0, b"abcdef")], [(0, 3, b"XYZ")]]
    write_log(store_dir, records)
    keep = store_dir + "-keep"
    shutil.copytree(store_dir, keep)
    fdt = FdTable(store_dir)
    wal.recover(store_dir, CHUNK, fdt)
    fdt.close_all()
    # crash before the log reset: the same log replays over the written state
    shutil.copy(os.path.join(keep, wal.LOG_NAME), os.path.join(store_dir, wal.LOG_NAME))
    fdt = FdTable(store_dir)
    info = wal.recover(store_dir, CHUNK, fdt)
    fdt.close_all()
    assert info.records == 2
    assert_matches_oracle(store_dir, records)
