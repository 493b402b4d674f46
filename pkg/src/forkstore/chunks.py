"""Canonical chunk serialization and content ids.

A chunk is the unit of storage and deduplication. Its serialized form is
fixed for all time:

    offset  size  field
    0       1     format version (currently 0x01)
    1       1     chunk type tag
    2       4     payload length, little-endian unsigned
    6       n     payload

The cid of a chunk is the digest of exactly these serialized bytes, so equal
cids imply byte-identical chunks and any mutation of header or payload is
detectable by re-digesting. Digests are 32 bytes regardless of algorithm.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from enum import IntEnum

from .errors import FormatError

FORMAT_VERSION = 0x01
HEADER_SIZE = 6
CID_SIZE = 32
MAX_PAYLOAD = 0xFFFFFFFF

Cid = bytes  # 32-byte digest of a chunk's serialized bytes


class ChunkType(IntEnum):
    """The seven kinds of chunk. Tag values are part of the storage format."""

    META = 1    # object metadata (version node)
    UINDEX = 2  # index over position-addressed children
    SINDEX = 3  # index over key-ordered children
    BLOB = 4    # leaf: raw bytes
    LIST = 5    # leaf: length-prefixed elements, positional
    SET = 6     # leaf: length-prefixed members, key-ordered
    MAP = 7     # leaf: length-prefixed key/value pairs, key-ordered

    @property
    def is_index(self) -> bool:
        return self in (ChunkType.UINDEX, ChunkType.SINDEX)

    @property
    def is_leaf(self) -> bool:
        return not self.is_index and self is not ChunkType.META


# Digest registry: name -> 32-byte digest function. The algorithm id is
# recorded in each store's log header; stores never mix algorithms.
_DIGESTS = {
    "sha256": lambda data: hashlib.sha256(data).digest(),
    "blake2b": lambda data: hashlib.blake2b(data, digest_size=32).digest(),
}

DEFAULT_DIGEST = "sha256"


def digest_names() -> tuple[str, ...]:
    return tuple(sorted(_DIGESTS))


def digest_bytes(data: bytes, algo: str = DEFAULT_DIGEST) -> bytes:
    try:
        fn = _DIGESTS[algo]
    except KeyError:
        raise FormatError(f"unknown digest algorithm: {algo!r}") from None
    return fn(data)


@dataclass(frozen=True)
class Chunk:
    type: ChunkType
    payload: bytes

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise FormatError(f"payload exceeds {MAX_PAYLOAD} bytes")


def serialize_chunk(chunk: Chunk) -> bytes:
    header = bytes((FORMAT_VERSION, chunk.type)) + len(chunk.payload).to_bytes(4, "little")
    return header + chunk.payload


def parse_chunk(data: bytes) -> Chunk:
    """Inverse of serialize_chunk. Rejects anything malformed or trailing."""
    chunk, size = parse_chunk_prefix(data)
    if size != len(data):
        raise FormatError(f"{len(data) - size} trailing bytes after chunk")
    return chunk


def parse_chunk_prefix(data: bytes, offset: int = 0) -> tuple[Chunk, int]:
    """Parse one chunk starting at offset; returns (chunk, end offset).

    Raises FormatError on a malformed or incomplete record, which callers use
    to stop scanning a torn log tail.
    """
    if len(data) - offset < HEADER_SIZE:
        raise FormatError("truncated chunk header")
    version = data[offset]
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported chunk format version {version:#x}")
    try:
        ctype = ChunkType(data[offset + 1])
    except ValueError:
        raise FormatError(f"unknown chunk type tag {data[offset + 1]:#x}") from None
    length = int.from_bytes(data[offset + 2 : offset + 6], "little")
    end = offset + HEADER_SIZE + length
    if end > len(data):
        raise FormatError("truncated chunk payload")
    return Chunk(ctype, bytes(data[offset + HEADER_SIZE : end])), end


def compute_cid(chunk: Chunk, algo: str = DEFAULT_DIGEST) -> Cid:
    return digest_bytes(serialize_chunk(chunk), algo)
