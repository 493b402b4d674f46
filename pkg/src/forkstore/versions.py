"""Version records: immutable commit metadata forming a history DAG.

A version pins one value under a key (inline bytes for primitive kinds, a
tree root cid for chunkable kinds), lists the uids of the versions it was
derived from, and carries its DAG depth so ancestor searches can walk
best-first. The record is serialized into a Meta chunk and the chunk's cid
is the version's uid, which makes every version self-certifying: the uid
covers the value, the bases, everything.
"""

from __future__ import annotations

import heapq
import struct
from dataclasses import dataclass, field
from typing import Iterator

from .chunks import CID_SIZE, Chunk, ChunkType, Cid
from .errors import ChunkNotFound, FormatError, ObjectNotFound, TypeMismatch
from .values import ValueKind

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass(frozen=True)
class Version:
    """One committed version of a key's value."""

    key: bytes
    kind: ValueKind
    data: bytes  # root cid for chunkable kinds, inline value otherwise
    bases: tuple[Cid, ...] = ()
    context: bytes = b""
    depth: int = 0

    def encode(self) -> bytes:
        out = bytearray()
        out.append(self.kind)
        out += _U32.pack(len(self.key)) + self.key
        out += _U32.pack(len(self.data)) + self.data
        out += _U64.pack(self.depth)
        out += _U32.pack(len(self.bases))
        for uid in self.bases:
            out += uid
        out += _U32.pack(len(self.context)) + self.context
        return bytes(out)

    @classmethod
    def decode(cls, payload: bytes) -> "Version":
        try:
            kind = ValueKind(payload[0])
            pos = 1
            klen = _U32.unpack_from(payload, pos)[0]
            key = payload[pos + 4 : pos + 4 + klen]
            pos += 4 + klen
            dlen = _U32.unpack_from(payload, pos)[0]
            data = payload[pos + 4 : pos + 4 + dlen]
            pos += 4 + dlen
            depth = _U64.unpack_from(payload, pos)[0]
            pos += 8
            nbases = _U32.unpack_from(payload, pos)[0]
            pos += 4
            bases = []
            for _ in range(nbases):
                uid = payload[pos : pos + CID_SIZE]
                if len(uid) != CID_SIZE:
                    raise FormatError("truncated base uid")
                bases.append(uid)
                pos += CID_SIZE
            clen = _U32.unpack_from(payload, pos)[0]
            context = payload[pos + 4 : pos + 4 + clen]
            pos += 4 + clen
        except (IndexError, struct.error, ValueError) as exc:
            raise FormatError(f"bad version record: {exc}") from None
        if len(key) != klen or len(data) != dlen or len(context) != clen:
            raise FormatError("truncated version record")
        if pos != len(payload):
            raise FormatError("version record has trailing bytes")
        return cls(key, kind, data, tuple(bases), context, depth)


def commit_version(
    store,
    key: bytes,
    kind: ValueKind,
    data: bytes,
    bases: tuple[Cid, ...] | list[Cid] = (),
    context: bytes = b"",
) -> Cid:
    """Store a version record derived from `bases`; returns its uid.

    A version with no bases is a first version and sits at depth 0; every
    derived version sits one past its deepest base.
    """
    try:
        kind = ValueKind(kind)
    except ValueError:
        raise TypeMismatch(f"{ChunkType(kind).name} is not a value kind") from None
    bases = tuple(bases)
    depth = 0
    for uid in bases:
        depth = max(depth, load_version(store, uid).depth + 1)
    v = Version(bytes(key), kind, data, bases, bytes(context), depth)
    return store.put_chunk(Chunk(ChunkType.META, v.encode()))


def load_version(store, uid: Cid, verify_depth: bool = False) -> Version:
    try:
        chunk = store.get_chunk(uid)
    except ChunkNotFound:
        raise ObjectNotFound(uid) from None
    if chunk.type is not ChunkType.META:
        raise ObjectNotFound(uid)
    v = Version.decode(chunk.payload)
    if verify_depth:
        expect = 1 + max((load_version(store, b).depth for b in v.bases), default=-1)
        if v.depth != expect:
            raise FormatError(f"depth {v.depth} disagrees with bases (expected {expect})")
    return v


@dataclass(frozen=True)
class TrackEntry:
    uid: Cid
    version: Version = field(compare=False)
    hops: int = 0  # shortest base-edge distance from the tracked version


def track(store, uid: Cid, max_hops: int | None = None) -> list[TrackEntry]:
    """Lineage of a version: itself and its ancestors, breadth-first.

    Entries come back ordered by hop count, ties broken by uid, so the
    result is a pure function of the DAG regardless of traversal luck.
    """
    seen = {uid: 0}
    frontier = [uid]
    out = []
    while frontier:
        batch = sorted(frontier)
        frontier = []
        for u in batch:
            v = load_version(store, u)
            out.append(TrackEntry(u, v, seen[u]))
            if max_hops is not None and seen[u] >= max_hops:
                continue
            for b in v.bases:
                if b not in seen:
                    seen[b] = seen[u] + 1
                    frontier.append(b)
    return out


def iter_ancestors(store, uid: Cid) -> Iterator[Cid]:
    """Every uid reachable through bases, the start included, no order."""
    seen = {uid}
    stack = [uid]
    while stack:
        u = stack.pop()
        yield u
        for b in load_version(store, u).bases:
            if b not in seen:
                seen.add(b)
                stack.append(b)


def find_lca(store, a: Cid, b: Cid) -> Cid | None:
    """Deepest common ancestor of two versions, or None when disjoint.

    Best-first walk popping deeper versions first: the first uid reached
    from both sides is the deepest one, and among equally deep candidates
    the smallest uid wins, so the answer is deterministic.
    """
    FROM_A, FROM_B = 1, 2
    flags = {a: FROM_A}
    if b in flags:
        flags[b] = FROM_A | FROM_B
    else:
        flags[b] = FROM_B
    heap = [(-load_version(store, a).depth, a), (-load_version(store, b).depth, b)]
    heapq.heapify(heap)
    in_heap = {a, b}
    while heap:
        negd, uid = heapq.heappop(heap)
        if uid not in in_heap:
            continue
        in_heap.discard(uid)
        mark = flags[uid]
        if mark == FROM_A | FROM_B:
            return uid
        for base in load_version(store, uid).bases:
            prev = flags.get(base, 0)
            if prev | mark == prev:
                continue
            flags[base] = prev | mark
            if base not in in_heap:
                heapq.heappush(heap, (-load_version(store, base).depth, base))
                in_heap.add(base)
    return None
