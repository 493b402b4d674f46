"""Typed values and client-side edit buffering.

Two families. Primitive values (String, Tuple, Integer) are small, encoded
inline in the version record, and never deduplicated. Chunkable values
(Blob, List, Map, Set) live in their own trees and the record carries only
the root cid, so a version of any size costs one small record plus whatever
tree chunks its edit actually touched.

Handles wrap a tree and buffer a sequence of edits: every mutation builds
the chunks for the new state immediately, but nothing is reachable until
the handle is committed under a key, so a batch of edits leaves exactly one
new version behind.
"""

from __future__ import annotations

import struct
from enum import IntEnum
from typing import Iterator, Sequence

from .chunking import ChunkerConfig, DEFAULT_CONFIG
from .chunks import ChunkType, Cid
from .errors import IntegerOverflow, OutOfRange, TypeMismatch, ValueTooLarge
from .postree import PosTree, build

_U32 = struct.Struct("<I")
_I64 = struct.Struct("<q")

INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1


class ValueKind(IntEnum):
    """Tag stored in every version record; chunkables reuse their leaf tag."""

    BLOB = int(ChunkType.BLOB)
    LIST = int(ChunkType.LIST)
    SET = int(ChunkType.SET)
    MAP = int(ChunkType.MAP)
    STRING = 8
    TUPLE = 9
    INTEGER = 10

    @property
    def is_chunkable(self) -> bool:
        return self.value <= int(ChunkType.MAP)

    @property
    def chunk_type(self) -> ChunkType:
        if not self.is_chunkable:
            raise TypeMismatch(f"{self.name} values are not stored as trees")
        return ChunkType(self.value)


CHUNKABLE_KINDS = (ValueKind.BLOB, ValueKind.LIST, ValueKind.SET, ValueKind.MAP)
PRIMITIVE_KINDS = (ValueKind.STRING, ValueKind.TUPLE, ValueKind.INTEGER)


def _as_field(item) -> bytes:
    if isinstance(item, str):
        return item.encode("utf-8")
    if isinstance(item, (bytes, bytearray, memoryview)):
        return bytes(item)
    raise TypeMismatch(f"tuple fields must be bytes or str, not {type(item).__name__}")


def encode_tuple(fields: Sequence) -> bytes:
    out = bytearray()
    for item in fields:
        raw = _as_field(item)
        out += _U32.pack(len(raw)) + raw
    return bytes(out)


def decode_tuple(data: bytes) -> tuple[bytes, ...]:
    fields = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise TypeMismatch("truncated tuple encoding")
        n = _U32.unpack_from(data, pos)[0]
        pos += 4
        if pos + n > len(data):
            raise TypeMismatch("truncated tuple field")
        fields.append(data[pos : pos + n])
        pos += n
    return tuple(fields)


def _check_int64(value: int) -> int:
    if not INT64_MIN <= value <= INT64_MAX:
        raise IntegerOverflow(f"{value} does not fit in a signed 64-bit integer")
    return value


def encode_primitive(kind: ValueKind, value) -> bytes:
    if kind is ValueKind.STRING:
        if not isinstance(value, str):
            raise TypeMismatch(f"expected str, got {type(value).__name__}")
        return value.encode("utf-8")
    if kind is ValueKind.INTEGER:
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeMismatch(f"expected int, got {type(value).__name__}")
        return _I64.pack(_check_int64(value))
    if kind is ValueKind.TUPLE:
        return encode_tuple(tuple(value))
    raise TypeMismatch(f"{ValueKind(kind).name} is not a primitive kind")


def decode_primitive(kind: ValueKind, data: bytes):
    if kind is ValueKind.STRING:
        return data.decode("utf-8")
    if kind is ValueKind.INTEGER:
        if len(data) != 8:
            raise TypeMismatch("integer value must be exactly 8 bytes")
        return _I64.unpack(data)[0]
    if kind is ValueKind.TUPLE:
        return decode_tuple(data)
    raise TypeMismatch(f"{ValueKind(kind).name} is not a primitive kind")


def infer_kind(value) -> ValueKind:
    """Map a plain Python value onto its stored kind."""
    if isinstance(value, Handle):
        return value.kind
    if isinstance(value, (bytes, bytearray, memoryview)):
        return ValueKind.BLOB
    if isinstance(value, str):
        return ValueKind.STRING
    if isinstance(value, bool):
        raise TypeMismatch("bool is not a stored value type")
    if isinstance(value, int):
        return ValueKind.INTEGER
    if isinstance(value, tuple):
        return ValueKind.TUPLE
    if isinstance(value, list):
        return ValueKind.LIST
    if isinstance(value, dict):
        return ValueKind.MAP
    if isinstance(value, (set, frozenset)):
        return ValueKind.SET
    raise TypeMismatch(f"no value kind for {type(value).__name__}")


# --- primitive operations ----------------------------------------------------
#
# Pure transformations; the caller keeps the result and commits it whenever
# it wants. Integers are fixed-width and report overflow instead of wrapping.


def string_append(value: str, suffix: str) -> str:
    return value + suffix


def string_insert(value: str, position: int, piece: str) -> str:
    if not 0 <= position <= len(value):
        raise OutOfRange(f"insert position {position} outside [0, {len(value)}]")
    return value[:position] + piece + value[position:]


def tuple_append(value: tuple, item) -> tuple:
    return tuple(value) + (_as_field(item),)


def tuple_insert(value: tuple, position: int, item) -> tuple:
    value = tuple(value)
    if not 0 <= position <= len(value):
        raise OutOfRange(f"insert position {position} outside [0, {len(value)}]")
    return value[:position] + (_as_field(item),) + value[position:]


def integer_add(value: int, delta: int) -> int:
    return _check_int64(value + delta)


def integer_multiply(value: int, factor: int) -> int:
    return _check_int64(value * factor)


# --- chunkable handles --------------------------------------------------------


class Handle:
    """Editable view of one chunkable value, detached from any branch."""

    kind: ValueKind

    def __init__(self, tree: PosTree):
        expected = self.kind.chunk_type
        if tree.kind is not expected:
            raise TypeMismatch(f"tree holds {tree.kind.name}, handle needs {expected.name}")
        self.tree = tree

    @property
    def root_cid(self) -> Cid:
        return self.tree.root_cid

    def value(self):
        return self.tree.content()

    def __eq__(self, other) -> bool:
        return type(self) is type(other) and self.tree.root_cid == other.tree.root_cid

    def __hash__(self):
        return hash((type(self).__name__, self.tree.root_cid))

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.tree.root_cid.hex()[:12]})"


class BlobHandle(Handle):
    kind = ValueKind.BLOB

    def __len__(self) -> int:
        return self.tree.element_count()

    def read(self, offset: int = 0, size: int | None = None) -> bytes:
        return self.tree.read(offset, size)

    def insert(self, position: int, data: bytes) -> "BlobHandle":
        self.tree = self.tree.splice_bytes(position, 0, bytes(data))
        return self

    def remove(self, position: int, count: int) -> "BlobHandle":
        self.tree = self.tree.splice_bytes(position, count)
        return self

    def append(self, data: bytes) -> "BlobHandle":
        return self.insert(len(self), data)


class ListHandle(Handle):
    kind = ValueKind.LIST

    def __len__(self) -> int:
        return self.tree.element_count()

    def get(self, position: int) -> bytes:
        return self.tree.get_at(position)

    def insert(self, position: int, *items) -> "ListHandle":
        if not 0 <= position <= len(self):
            raise OutOfRange(f"insert position {position} outside [0, {len(self)}]")
        self.tree = self.tree.splice_items(position, position, [_as_field(i) for i in items])
        return self

    def append(self, *items) -> "ListHandle":
        return self.insert(len(self), *items)

    def delete(self, position: int, count: int = 1) -> "ListHandle":
        self.tree = self.tree.splice_items(position, position + count, [])
        return self

    def __iter__(self) -> Iterator[bytes]:
        return self.tree.iterate()


class MapHandle(Handle):
    kind = ValueKind.MAP

    def __len__(self) -> int:
        return self.tree.element_count()

    def get(self, key: bytes) -> bytes:
        return self.tree.lookup(_as_field(key))[1]

    def contains(self, key: bytes) -> bool:
        return self.tree.contains(_as_field(key))

    def put(self, key: bytes, value: bytes) -> "MapHandle":
        self.tree = self.tree.map_put(_as_field(key), _as_field(value))
        return self

    def delete(self, key: bytes) -> "MapHandle":
        self.tree = self.tree.map_delete(_as_field(key))
        return self

    def items(self, start: bytes | None = None) -> Iterator[tuple[bytes, bytes]]:
        return self.tree.iterate(start)


class SetHandle(Handle):
    kind = ValueKind.SET

    def __len__(self) -> int:
        return self.tree.element_count()

    def contains(self, member: bytes) -> bool:
        return self.tree.contains(_as_field(member))

    def add(self, member: bytes) -> "SetHandle":
        self.tree = self.tree.set_add(_as_field(member))
        return self

    def discard(self, member: bytes) -> "SetHandle":
        self.tree = self.tree.set_discard(_as_field(member))
        return self

    def members(self, start: bytes | None = None) -> Iterator[bytes]:
        return self.tree.iterate(start)

    def value(self) -> set:
        return set(self.tree.content())


_HANDLE_FOR = {
    ValueKind.BLOB: BlobHandle,
    ValueKind.LIST: ListHandle,
    ValueKind.MAP: MapHandle,
    ValueKind.SET: SetHandle,
}


def handle_for(store, kind: ValueKind, root_cid: Cid, config: ChunkerConfig) -> Handle:
    kind = ValueKind(kind)
    return _HANDLE_FOR[kind](PosTree(store, kind.chunk_type, root_cid, config))


def _normalize_content(kind: ValueKind, value):
    if kind is ValueKind.BLOB:
        return bytes(value)
    if kind is ValueKind.LIST:
        return [_as_field(v) for v in value]
    if kind is ValueKind.MAP:
        return {_as_field(k): _as_field(v) for k, v in value.items()}
    return sorted(_as_field(v) for v in value)


def persist_value(store, value, config: ChunkerConfig = DEFAULT_CONFIG) -> tuple[ValueKind, bytes]:
    """Make `value` durable; returns (kind, data field for the record).

    Chunkable values become trees (a handle's tree is reused as-is) and
    data is the 32-byte root cid. Primitives encode inline, capped at one
    maximal chunk so a record can never outgrow what a leaf may hold.
    """
    if isinstance(value, Handle):
        return value.kind, value.tree.root_cid
    kind = infer_kind(value)
    if kind.is_chunkable:
        tree = build(store, kind.chunk_type, _normalize_content(kind, value), config)
        return kind, tree.root_cid
    data = encode_primitive(kind, value)
    if len(data) > config.max_leaf_bytes:
        raise ValueTooLarge(
            f"{kind.name} value is {len(data)} bytes, over the {config.max_leaf_bytes}"
            f" byte cap for inline values; use a chunkable kind"
        )
    return kind, data


def load_value(store, kind: ValueKind, data: bytes, config: ChunkerConfig = DEFAULT_CONFIG):
    """Materialized Python value for a stored (kind, data) pair."""
    kind = ValueKind(kind)
    if kind.is_chunkable:
        handle = handle_for(store, kind, data, config)
        return handle.value()
    return decode_primitive(kind, data)
