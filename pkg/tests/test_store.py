from __future__ import annotations

import os
import threading

import pytest

from forkstore.chunks import Chunk, ChunkType, compute_cid, serialize_chunk
from forkstore.errors import ChunkNotFound, FormatError, StoreClosed, TamperDetected
from forkstore.store import LOG_NAME, ChunkStore, scan_log


def _chunk(i: int, size: int = 64) -> Chunk:
    return Chunk(ChunkType.BLOB, (b"%08d" % i) * (size // 8))


def test_put_get_round_trip(store):
    chunk = Chunk(ChunkType.MAP, b"hello world")
    cid = store.put_chunk(chunk)
    assert cid == compute_cid(chunk)
    assert store.get_chunk(cid) == chunk
    assert cid in store


def test_get_missing_chunk_raises(store):
    with pytest.raises(ChunkNotFound):
        store.get_chunk(b"\x00" * 32)


def test_duplicate_put_appends_nothing(store, tmp_path):
    log = tmp_path / "store" / LOG_NAME
    chunk = _chunk(1)
    store.put_chunk(chunk)
    size_before = os.path.getsize(log)
    cid = store.put_chunk(chunk)
    assert os.path.getsize(log) == size_before
    assert store.get_chunk(cid) == chunk
    assert store.stats().dedup_hit_count == 1
    assert store.stats().unique_chunk_count == 1


def test_stats_track_payload_and_log_bytes(store):
    for i in range(10):
        store.put_chunk(_chunk(i))
    st = store.stats()
    assert st.unique_chunk_count == 10
    assert st.total_payload_bytes == 640
    assert st.log_file_bytes > 640  # headers and log preamble on top
    assert st.dedup_hit_count == 0


def test_reopen_rebuilds_index(tmp_path):
    path = tmp_path / "s"
    cids = []
    with ChunkStore(path) as s:
        for i in range(50):
            cids.append(s.put_chunk(_chunk(i)))
    with ChunkStore(path) as s:
        for i, cid in enumerate(cids):
            assert s.get_chunk(cid) == _chunk(i)
        assert s.stats().unique_chunk_count == 50


def test_reopen_without_sidecar_scans_log(tmp_path):
    path = tmp_path / "s"
    with ChunkStore(path) as s:
        cid = s.put_chunk(_chunk(7))
    os.unlink(path / "chunks.idx")
    with ChunkStore(path) as s:
        assert s.get_chunk(cid) == _chunk(7)


def test_stale_sidecar_is_ignored(tmp_path):
    path = tmp_path / "s"
    with ChunkStore(path) as s:
        s.put_chunk(_chunk(1))
    # Append another chunk without refreshing the sidecar.
    s = ChunkStore(path)
    cid2 = s.put_chunk(_chunk(2))
    s._append_fh.flush()
    os.close(s._read_fd)
    s._append_fh.close()  # skip close() so the sidecar stays stale
    with ChunkStore(path) as s2:
        assert s2.get_chunk(cid2) == _chunk(2)
        assert s2.stats().unique_chunk_count == 2


def test_torn_write_recovery_at_every_truncation_offset(tmp_path):
    # Write three records, then simulate a crash that tore the last append at
    # every possible byte offset; the first two records must always survive.
    base = tmp_path / "base"
    with ChunkStore(base) as s:
        keep = [s.put_chunk(_chunk(0)), s.put_chunk(_chunk(1))]
        s.put_chunk(_chunk(2))
        log_bytes = open(base / LOG_NAME, "rb").read()
    last_len = len(serialize_chunk(_chunk(2)))
    body_end = len(log_bytes)
    for cut in range(body_end - last_len + 1, body_end):
        victim = tmp_path / f"cut{cut}"
        victim.mkdir()
        with open(victim / LOG_NAME, "wb") as fh:
            fh.write(log_bytes[:cut])
        with ChunkStore(victim) as s:
            assert s.stats().unique_chunk_count == 2
            for i, cid in enumerate(keep):
                assert s.get_chunk(cid) == _chunk(i)
            # The torn tail was truncated away; new appends must work.
            cid3 = s.put_chunk(_chunk(3))
        with ChunkStore(victim) as s:
            assert s.get_chunk(cid3) == _chunk(3)


def test_mid_log_corruption_is_not_silently_skipped(tmp_path):
    path = tmp_path / "s"
    with ChunkStore(path) as s:
        s.put_chunk(_chunk(0))
        s.put_chunk(_chunk(1))
    raw = bytearray(open(path / LOG_NAME, "rb").read())
    raw[12] ^= 0xFF  # version byte of the first record
    open(path / LOG_NAME, "wb").write(bytes(raw))
    os.unlink(path / "chunks.idx")
    with pytest.raises(FormatError):
        ChunkStore(path)


def test_verify_detects_any_single_byte_flip(tmp_path):
    path = tmp_path / "s"
    s = ChunkStore(path)
    cid = s.put_chunk(Chunk(ChunkType.BLOB, b"sensitive-bytes"))
    offset, length = s._index[cid]
    s.close()
    raw = bytearray(open(path / LOG_NAME, "rb").read())
    for i in range(offset, offset + length):
        mutated = bytearray(raw)
        mutated[i] ^= 0x01
        open(path / LOG_NAME, "wb").write(bytes(mutated))
        s = ChunkStore(path)  # sidecar still covers the same length
        with pytest.raises((TamperDetected, FormatError)):
            s.get_chunk(cid, verify=True)
        s.close()
    open(path / LOG_NAME, "wb").write(bytes(raw))


def test_unverified_get_returns_raw_payload_flip(tmp_path):
    # Without verify=True a payload flip goes unnoticed; this pins the verify
    # flag as the tamper boundary rather than an accident of parsing.
    path = tmp_path / "s"
    s = ChunkStore(path)
    cid = s.put_chunk(Chunk(ChunkType.BLOB, b"AAAA"))
    offset, length = s._index[cid]
    s.close()
    raw = bytearray(open(path / LOG_NAME, "rb").read())
    raw[offset + length - 1] ^= 0x01
    open(path / LOG_NAME, "wb").write(bytes(raw))
    s = ChunkStore(path)
    assert s.get_chunk(cid).payload != b"AAAA"
    with pytest.raises(TamperDetected):
        s.get_chunk(cid, verify=True)
    s.close()


def test_scan_log_yields_records_in_append_order(tmp_path):
    path = tmp_path / "s"
    chunks = [_chunk(i) for i in range(5)]
    with ChunkStore(path) as s:
        for c in chunks:
            s.put_chunk(c)
    data = open(path / LOG_NAME, "rb").read()
    seen = [c for _, c, _, _ in scan_log(data)]
    assert seen == chunks


def test_digest_algo_persisted_and_enforced(tmp_path):
    path = tmp_path / "s"
    with ChunkStore(path, digest_algo="blake2b") as s:
        cid = s.put_chunk(_chunk(0))
        assert cid == compute_cid(_chunk(0), "blake2b")
    with ChunkStore(path) as s:
        assert s.digest_algo == "blake2b"
        assert s.get_chunk(cid) == _chunk(0)
    with pytest.raises(FormatError):
        ChunkStore(path, digest_algo="sha256")


def test_operations_after_close_raise(tmp_path):
    s = ChunkStore(tmp_path / "s")
    cid = s.put_chunk(_chunk(0))
    s.close()
    with pytest.raises(StoreClosed):
        s.put_chunk(_chunk(1))
    with pytest.raises(StoreClosed):
        s.get_chunk(cid)
    s.close()  # idempotent


def test_concurrent_puts_all_land(tmp_path):
    s = ChunkStore(tmp_path / "s")
    errors = []

    def worker(base):
        try:
            for i in range(100):
                s.put_chunk(_chunk(base * 1000 + i))
        except Exception as exc:  # pragma: no cover
            errors.append(exc)

    threads = [threading.Thread(target=worker, args=(t,)) for t in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert s.stats().unique_chunk_count == 800
    s.close()
    with ChunkStore(tmp_path / "s") as s2:
        assert s2.stats().unique_chunk_count == 800
