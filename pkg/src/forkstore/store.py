"""Log-structured, deduplicating chunk store.

Chunks are appended to chunks.log and never rewritten; the cid -> (offset,
length) index lives in memory and is rebuilt by scanning the log at open.
A sidecar chunks.idx is written on clean close purely as an open-time
shortcut: it is trusted only when it covers the exact current log length,
otherwise the store falls back to a full scan. Torn final records (a crash
mid-append) are detected during the scan and dropped; every record fully
written before the crash survives.

Log layout:

    magic "FKB1" | u8 algo id length | algo id (ascii) | chunk records...

where each record is one canonically serialized chunk. The digest algorithm
is fixed at store creation and applies to every cid in the store.
"""

from __future__ import annotations

import logging
import os
import struct
import threading
from dataclasses import dataclass
from typing import Iterator

from .chunks import (
    DEFAULT_DIGEST,
    FORMAT_VERSION,
    HEADER_SIZE,
    Chunk,
    ChunkType,
    Cid,
    compute_cid,
    digest_bytes,
    digest_names,
    parse_chunk,
    parse_chunk_prefix,
    serialize_chunk,
)
from .errors import ChunkNotFound, FormatError, StoreClosed, TamperDetected

logger = logging.getLogger(__name__)

MAGIC = b"FKB1"
LOG_NAME = "chunks.log"
IDX_NAME = "chunks.idx"
_IDX_MAGIC = b"FKBI"
_IDX_ROW = struct.Struct("<32sQI")  # cid, offset, record length


@dataclass
class ChunkStoreStats:
    unique_chunk_count: int
    total_payload_bytes: int
    log_file_bytes: int
    dedup_hit_count: int


@dataclass
class StoreCounters:
    """Instrumentation for tests and benchmarks, not part of durability."""

    puts: int = 0
    appends: int = 0
    dedup_hits: int = 0
    gets: int = 0

    def snapshot(self) -> "StoreCounters":
        return StoreCounters(self.puts, self.appends, self.dedup_hits, self.gets)


def _log_header(algo: str) -> bytes:
    ident = algo.encode("ascii")
    return MAGIC + bytes((len(ident),)) + ident


def _parse_log_header(data: bytes) -> tuple[str, int]:
    if data[:4] != MAGIC:
        raise FormatError("not a chunk log: bad magic")
    if len(data) < 5:
        raise FormatError("truncated log header")
    n = data[4]
    if len(data) < 5 + n:
        raise FormatError("truncated log header")
    try:
        algo = data[5 : 5 + n].decode("ascii")
    except UnicodeDecodeError:
        raise FormatError("garbled digest algorithm name in log header") from None
    if algo not in digest_names():
        raise FormatError(f"unknown digest algorithm in log header: {algo!r}")
    return algo, 5 + n


def scan_log(data: bytes) -> Iterator[tuple[Cid, Chunk, int, int]]:
    """Yield (cid, chunk, offset, end) for every complete record.

    A truncated final record is logged and skipped; anything else malformed
    raises FormatError (the log is append-only, so corruption mid-file is
    not a crash artifact and must not be silently ignored).
    """
    algo, pos = _parse_log_header(data)
    while pos < len(data):
        try:
            chunk, end = parse_chunk_prefix(data, pos)
        except FormatError as exc:
            if _is_torn_tail(data, pos):
                logger.warning("dropping torn final record at offset %d: %s", pos, exc)
                return
            raise
        yield digest_bytes(data[pos:end], algo), chunk, pos, end
        pos = end


def _is_torn_tail(data: bytes, pos: int) -> bool:
    # A torn append leaves a strict prefix of one valid record at EOF: the
    # version/type bytes must look right and the declared payload must run
    # past end-of-file. Anything else is corruption, not a crash artifact.
    avail = len(data) - pos
    if avail >= 1 and data[pos] != FORMAT_VERSION:
        return False
    if avail >= 2 and not 1 <= data[pos + 1] <= max(ChunkType):
        return False
    if avail < HEADER_SIZE:
        return True
    length = int.from_bytes(data[pos + 2 : pos + 6], "little")
    return pos + HEADER_SIZE + length > len(data)


class ChunkStore:
    """Persistent content-addressed store rooted at a directory.

    put_chunk is internally serialized; get_chunk may be called from any
    thread concurrently with puts (reads use pread on a separate descriptor,
    and the index only ever grows).
    """

    def __init__(self, path: str | os.PathLike, digest_algo: str | None = None):
        self.path = os.fspath(path)
        os.makedirs(self.path, exist_ok=True)
        self._log_path = os.path.join(self.path, LOG_NAME)
        self._lock = threading.Lock()
        self._index: dict[Cid, tuple[int, int]] = {}
        self._closed = False
        self._dedup_hits = 0
        self._payload_bytes = 0
        self.counters = StoreCounters()

        fresh = not os.path.exists(self._log_path)
        if fresh:
            self.digest_algo = digest_algo or DEFAULT_DIGEST
            if self.digest_algo not in digest_names():
                raise FormatError(f"unknown digest algorithm: {self.digest_algo!r}")
            with open(self._log_path, "wb") as fh:
                fh.write(_log_header(self.digest_algo))
        self._append_fh = open(self._log_path, "ab")
        self._read_fd = os.open(self._log_path, os.O_RDONLY)
        self._recover(expected_algo=digest_algo)

    def _recover(self, expected_algo: str | None) -> None:
        with open(self._log_path, "rb") as fh:
            data = fh.read()
        algo, body_start = _parse_log_header(data)
        if expected_algo is not None and algo != expected_algo:
            raise FormatError(
                f"store uses digest {algo!r}, requested {expected_algo!r}"
            )
        self.digest_algo = algo
        if self._load_sidecar(len(data)):
            self._log_size = len(data)
            return
        end = body_start
        for cid, chunk, off, rec_end in scan_log(data):
            if cid not in self._index:
                self._index[cid] = (off, rec_end - off)
                self._payload_bytes += len(chunk.payload)
            end = rec_end
        if end < len(data):
            # Torn tail: make the next append start after the last good record.
            logger.warning("truncating %s to %d bytes", self._log_path, end)
            self._append_fh.truncate(end)
        self._log_size = end

    def _load_sidecar(self, log_size: int) -> bool:
        idx_path = os.path.join(self.path, IDX_NAME)
        try:
            with open(idx_path, "rb") as fh:
                raw = fh.read()
        except FileNotFoundError:
            return False
        if len(raw) < 12 or raw[:4] != _IDX_MAGIC:
            return False
        covered = int.from_bytes(raw[4:12], "little")
        if covered != log_size or (len(raw) - 12) % _IDX_ROW.size != 0:
            return False
        for row_off in range(12, len(raw), _IDX_ROW.size):
            cid, off, length = _IDX_ROW.unpack_from(raw, row_off)
            self._index[cid] = (off, length)
            self._payload_bytes += length - HEADER_SIZE
        return True

    def _write_sidecar(self) -> None:
        body = bytearray(_IDX_MAGIC)
        body += os.path.getsize(self._log_path).to_bytes(8, "little")
        for cid, (off, length) in self._index.items():
            body += _IDX_ROW.pack(cid, off, length)
        tmp = os.path.join(self.path, IDX_NAME + ".tmp")
        with open(tmp, "wb") as fh:
            fh.write(body)
        os.replace(tmp, os.path.join(self.path, IDX_NAME))

    def _check_open(self) -> None:
        if self._closed:
            raise StoreClosed(f"store at {self.path} is closed")

    def put_chunk(self, chunk: Chunk) -> Cid:
        """Store a chunk, returning its cid. Duplicate content is a no-op."""
        self._check_open()
        record = serialize_chunk(chunk)
        cid = digest_bytes(record, self.digest_algo)
        with self._lock:
            self.counters.puts += 1
            if cid in self._index:
                self._dedup_hits += 1
                self.counters.dedup_hits += 1
                return cid
            # tell() is unreliable after a recovery truncate; track size ourselves.
            offset = self._log_size
            self._append_fh.write(record)
            self._append_fh.flush()
            self._log_size = offset + len(record)
            self._index[cid] = (offset, len(record))
            self._payload_bytes += len(chunk.payload)
            self.counters.appends += 1
        return cid

    def get_chunk(self, cid: Cid, verify: bool = False) -> Chunk:
        self._check_open()
        self.counters.gets += 1
        try:
            offset, length = self._index[cid]
        except KeyError:
            raise ChunkNotFound(cid) from None
        record = os.pread(self._read_fd, length, offset)
        if verify:
            actual = digest_bytes(record, self.digest_algo)
            if actual != cid:
                raise TamperDetected(cid, actual)
        try:
            return parse_chunk(record)
        except FormatError:
            # Unparseable bytes at a valid offset mean the log was altered.
            raise TamperDetected(cid, digest_bytes(record, self.digest_algo)) from None

    def contains(self, cid: Cid) -> bool:
        self._check_open()
        return cid in self._index

    def __contains__(self, cid: Cid) -> bool:
        return self.contains(cid)

    def __len__(self) -> int:
        return len(self._index)

    def cids(self) -> list[Cid]:
        return list(self._index)

    def compute_cid(self, chunk: Chunk) -> Cid:
        return compute_cid(chunk, self.digest_algo)

    def stats(self) -> ChunkStoreStats:
        self._check_open()
        return ChunkStoreStats(
            unique_chunk_count=len(self._index),
            total_payload_bytes=self._payload_bytes,
            log_file_bytes=os.path.getsize(self._log_path),
            dedup_hit_count=self._dedup_hits,
        )

    def sync(self) -> None:
        self._check_open()
        with self._lock:
            self._append_fh.flush()
            os.fsync(self._append_fh.fileno())

    def close(self) -> None:
        if self._closed:
            return
        self.sync()
        self._write_sidecar()
        self._append_fh.close()
        os.close(self._read_fd)
        self._closed = True

    def __enter__(self) -> "ChunkStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        return f"ChunkStore({self.path!r}, chunks={len(self._index)})"


class VerifyingStore:
    """Read adapter that forces digest verification on every get."""

    def __init__(self, store):
        self._store = store

    def get_chunk(self, cid: Cid, verify: bool = True) -> Chunk:
        return self._store.get_chunk(cid, verify=True)

    def put_chunk(self, chunk: Chunk) -> Cid:
        return self._store.put_chunk(chunk)

    def contains(self, cid: Cid) -> bool:
        return self._store.contains(cid)

    @property
    def digest_algo(self) -> str:
        return self._store.digest_algo

    @property
    def counters(self):
        return self._store.counters
