"""Structurally shared search trees over content-defined chunks.

A tree stores one logical value (Blob, List, Set, or Map) as a hierarchy of
chunks: leaf chunks hold encoded elements, index chunks hold (child cid,
split key or element count) entries. Both levels are split by the detectors
in chunking.py, so node boundaries are a pure function of content and
configuration: two trees holding equal content have equal root cids no
matter what sequence of edits produced them, and the root cid authenticates
every byte underneath it (each index entry pins its child's digest).

Unsorted kinds (Blob, List) index children by element count and support
positional access; sorted kinds (Set, Map) keep elements unique and ordered
by key and index children by their largest key. Blob elements are single
bytes; the other kinds length-prefix each element so leaf payloads are
self-describing.

Updates rebuild only the nodes overlapping an edit: re-splitting restarts at
the edited node's left boundary and stops as soon as a produced boundary
lands on an old one (the detectors are windowed, so boundaries re-sync
almost immediately), after which parent levels splice in the replacement
entries the same way.
"""

from __future__ import annotations

import bisect
import struct
from dataclasses import dataclass, field
from difflib import SequenceMatcher
from typing import Callable, Iterator, Sequence

import numpy as np

from .chunking import ChunkerConfig, DEFAULT_CONFIG, split_bytes, split_elements, split_index_entries
from .chunks import CID_SIZE, Chunk, ChunkType, Cid
from .errors import ElementNotFound, FormatError, OutOfRange, TypeMismatch

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")

LEAF_KINDS = (ChunkType.BLOB, ChunkType.LIST, ChunkType.SET, ChunkType.MAP)
_INDEX_OF = {
    ChunkType.BLOB: ChunkType.UINDEX,
    ChunkType.LIST: ChunkType.UINDEX,
    ChunkType.SET: ChunkType.SINDEX,
    ChunkType.MAP: ChunkType.SINDEX,
}
_SORTED_KINDS = (ChunkType.SET, ChunkType.MAP)


# --- element encoding -------------------------------------------------------


def _enc_sized(value: bytes) -> bytes:
    return _U32.pack(len(value)) + value


def encode_element(kind: ChunkType, element) -> bytes:
    if kind is ChunkType.MAP:
        k, v = element
        return _U32.pack(len(k)) + k + _U32.pack(len(v)) + v
    if kind in (ChunkType.LIST, ChunkType.SET):
        return _enc_sized(element)
    raise TypeMismatch(f"no element encoding for {kind.name}")


def decode_elements(kind: ChunkType, payload: bytes) -> list:
    """Parse a leaf payload back into elements (Blob leaves are raw bytes)."""
    if kind is ChunkType.BLOB:
        return list(payload)  # rarely wanted; callers slice the payload
    out = []
    pos = 0
    n = len(payload)
    if kind is ChunkType.MAP:
        while pos < n:
            klen = _U32.unpack_from(payload, pos)[0]
            key = payload[pos + 4 : pos + 4 + klen]
            pos += 4 + klen
            vlen = _U32.unpack_from(payload, pos)[0]
            out.append((key, payload[pos + 4 : pos + 4 + vlen]))
            pos += 4 + vlen
    else:
        while pos < n:
            vlen = _U32.unpack_from(payload, pos)[0]
            out.append(payload[pos + 4 : pos + 4 + vlen])
            pos += 4 + vlen
    if pos != n:
        raise FormatError("leaf payload has trailing bytes")
    return out


def element_key(kind: ChunkType, element) -> bytes:
    return element[0] if kind is ChunkType.MAP else element


# --- index entries ----------------------------------------------------------


@dataclass(frozen=True)
class IndexEntry:
    """One child reference inside an index node.

    count is the child subtree's element count (unsorted kinds); key is the
    largest key within the child subtree (sorted kinds).
    """

    cid: Cid
    count: int = 0
    key: bytes | None = None

    def encode(self, itype: ChunkType) -> bytes:
        if itype is ChunkType.UINDEX:
            return self.cid + _U64.pack(self.count)
        return self.cid + _enc_sized(self.key if self.key is not None else b"")


def decode_entries(itype: ChunkType, payload: bytes) -> list[IndexEntry]:
    out = []
    pos = 0
    n = len(payload)
    while pos < n:
        cid = payload[pos : pos + CID_SIZE]
        if len(cid) != CID_SIZE:
            raise FormatError("truncated index entry")
        pos += CID_SIZE
        if itype is ChunkType.UINDEX:
            count = _U64.unpack_from(payload, pos)[0]
            out.append(IndexEntry(cid, count=count))
            pos += 8
        else:
            klen = _U32.unpack_from(payload, pos)[0]
            out.append(IndexEntry(cid, key=payload[pos + 4 : pos + 4 + klen]))
            pos += 4 + klen
    return out


def _entry_for_leaf(kind: ChunkType, cid: Cid, units, payload_len: int) -> IndexEntry:
    if kind in _SORTED_KINDS:
        return IndexEntry(cid, count=len(units), key=units[-1][0] if units else b"")
    if kind is ChunkType.BLOB:
        return IndexEntry(cid, count=payload_len)
    return IndexEntry(cid, count=len(units))


def _entry_for_index(itype: ChunkType, cid: Cid, children: Sequence[IndexEntry]) -> IndexEntry:
    if itype is ChunkType.UINDEX:
        return IndexEntry(cid, count=sum(e.count for e in children))
    return IndexEntry(cid, count=sum(e.count for e in children), key=children[-1].key)


# --- build ------------------------------------------------------------------


def _leaf_units(kind: ChunkType, content) -> list:
    """Normalize content to (key, encoded) pairs / encoded bytes lists."""
    if kind is ChunkType.MAP:
        items = sorted(content.items()) if isinstance(content, dict) else list(content)
        _check_sorted_unique([k for k, _ in items])
        return [(k, encode_element(kind, (k, v))) for k, v in items]
    if kind is ChunkType.SET:
        if isinstance(content, (set, frozenset)):
            members = sorted(content)
        else:
            members = list(content)
        _check_sorted_unique(members)
        return [(m, encode_element(kind, m)) for m in members]
    if kind is ChunkType.LIST:
        return [encode_element(kind, v) for v in content]
    raise TypeMismatch(f"{kind.name} does not take element units")


def _check_sorted_unique(keys: Sequence[bytes]) -> None:
    for a, b in zip(keys, keys[1:]):
        if a == b:
            raise ValueError(f"duplicate key {a!r}")
        if a > b:
            raise ValueError("keys must be sorted")


def _put_leaf(store, kind: ChunkType, payload: bytes) -> Cid:
    return store.put_chunk(Chunk(kind, payload))


def build(store, kind: ChunkType, content, config: ChunkerConfig = DEFAULT_CONFIG) -> "PosTree":
    """Build a tree bottom-up from full content; returns its handle."""
    if kind not in LEAF_KINDS:
        raise TypeMismatch(f"cannot build a tree of {ChunkType(kind).name}")
    kind = ChunkType(kind)
    if kind is ChunkType.BLOB:
        data = bytes(content)
        entries = []
        for g in split_bytes(data, config):
            payload = data[g.byte_start : g.byte_stop]
            cid = _put_leaf(store, kind, payload)
            entries.append(IndexEntry(cid, count=len(payload)))
    else:
        units = _leaf_units(kind, content)
        if kind in _SORTED_KINDS:
            groups = split_elements([e for _, e in units], config)
        else:
            groups = split_elements(units, config)
        entries = []
        for g in groups:
            chosen = units[g.start : g.stop]
            if kind in _SORTED_KINDS:
                payload = b"".join(e for _, e in chosen)
            else:
                payload = b"".join(chosen)
            cid = _put_leaf(store, kind, payload)
            entries.append(_entry_for_leaf(kind, cid, chosen, len(payload)))
    root, height = _build_up(store, kind, entries, config, base_height=1)
    return PosTree(store, kind, root, config, _height=height)


def _build_up(store, kind, entries, config, base_height):
    """Stack index levels until a single chunk remains."""
    itype = _INDEX_OF[kind]
    height = base_height
    while len(entries) > 1:
        encoded = [e.encode(itype) for e in entries]
        groups = split_index_entries([e.cid for e in entries], [len(b) for b in encoded], config)
        next_entries = []
        for g in groups:
            payload = b"".join(encoded[g.start : g.stop])
            cid = store.put_chunk(Chunk(itype, payload))
            next_entries.append(_entry_for_index(itype, cid, entries[g.start : g.stop]))
        entries = next_entries
        height += 1
    return entries[0].cid, height


# --- handles ----------------------------------------------------------------


@dataclass
class PosTree:
    """Handle on one stored tree; update methods return new handles."""

    store: object
    kind: ChunkType
    root_cid: Cid
    config: ChunkerConfig = DEFAULT_CONFIG
    _height: int | None = field(default=None, repr=False, compare=False)
    _count: int | None = field(default=None, repr=False, compare=False)
    _memo: dict = field(default_factory=dict, repr=False, compare=False)

    def _get(self, cid: Cid) -> Chunk:
        # Chunks are immutable, so index nodes are memoized per handle;
        # repeated descents (lookup after lookup, height then stream) hit
        # the store once per node. Leaves stay uncached to bound memory.
        chunk = self._memo.get(cid)
        if chunk is None:
            chunk = self.store.get_chunk(cid)
            if chunk.type.is_index:
                self._memo[cid] = chunk
        return chunk

    def height(self) -> int:
        if self._height is None:
            h = 1
            chunk = self._get(self.root_cid)
            while chunk.type.is_index:
                first = decode_entries(chunk.type, chunk.payload)[0]
                chunk = self._get(first.cid)
                h += 1
            self._height = h
        return self._height

    def element_count(self) -> int:
        if self._count is None:
            chunk = self._get(self.root_cid)
            if chunk.type is ChunkType.UINDEX:
                self._count = sum(e.count for e in decode_entries(chunk.type, chunk.payload))
            elif chunk.type is ChunkType.SINDEX:
                # Sorted index entries carry keys, not counts: walk the leaves.
                self._count = sum(
                    len(decode_elements(self.kind, payload)) for payload in self.iterate_leaves()
                )
            elif chunk.type is ChunkType.BLOB:
                self._count = len(chunk.payload)
            else:
                self._count = len(decode_elements(chunk.type, chunk.payload))
        return self._count

    # -- reads ---------------------------------------------------------------

    def lookup(self, key: bytes):
        """Sorted kinds: the element under key, or ElementNotFound."""
        self._need_sorted()
        chunk = self._get(self.root_cid)
        while chunk.type.is_index:
            entries = decode_entries(chunk.type, chunk.payload)
            keys = [e.key for e in entries]
            i = bisect.bisect_left(keys, key)
            if i == len(entries):
                raise ElementNotFound(key)
            chunk = self._get(entries[i].cid)
        elements = decode_elements(self.kind, chunk.payload)
        keys = [element_key(self.kind, e) for e in elements]
        i = bisect.bisect_left(keys, key)
        if i == len(keys) or keys[i] != key:
            raise ElementNotFound(key)
        return elements[i]

    def contains(self, key: bytes) -> bool:
        try:
            self.lookup(key)
            return True
        except ElementNotFound:
            return False

    def get_at(self, position: int):
        """Positional kinds: element at position (a byte value for Blob)."""
        self._need_positional()
        if position < 0:
            raise OutOfRange(f"position {position} out of range")
        chunk = self._get(self.root_cid)
        while chunk.type.is_index:
            entries = decode_entries(chunk.type, chunk.payload)
            for e in entries:
                if position < e.count:
                    chunk = self._get(e.cid)
                    break
                position -= e.count
            else:
                raise OutOfRange("position out of range")
        if self.kind is ChunkType.BLOB:
            if position >= len(chunk.payload):
                raise OutOfRange("position out of range")
            return chunk.payload[position]
        elements = decode_elements(self.kind, chunk.payload)
        if position >= len(elements):
            raise OutOfRange("position out of range")
        return elements[position]

    def read(self, offset: int = 0, size: int | None = None) -> bytes:
        """Blob range read; fetches only the leaves overlapping the range."""
        if self.kind is not ChunkType.BLOB:
            raise TypeMismatch("read() applies to Blob trees")
        total = self.element_count()
        if offset < 0 or offset > total:
            raise OutOfRange(f"offset {offset} out of range")
        stop = total if size is None else min(total, offset + max(0, size))
        spine, _, in_leaf = self._descend_pos(offset)
        out = bytearray()
        pos = offset - in_leaf  # start of the first fetched leaf
        for payload in self.iterate_leaves(spine):
            lo, hi = pos, pos + len(payload)
            if hi > offset and lo < stop:
                out += payload[max(0, offset - lo) : max(0, stop - lo)]
            pos = hi
            if pos >= stop:
                break
        return bytes(out)

    def iterate_leaves(self, start_spine: dict | None = None) -> Iterator[bytes]:
        for cid in self._level_stream(0, start_spine or {}):
            yield self._get(cid).payload

    def iterate(self, start=None) -> Iterator:
        """Elements in order; start is a key (sorted) or position (unsorted).

        Blob trees yield leaf-sized byte runs rather than single bytes.
        """
        skip_in_leaf = 0
        spine: dict = {}
        if start is not None:
            if self.kind in _SORTED_KINDS:
                spine, _, in_leaf, _found = self._descend_key(start)
            else:
                if not 0 <= start <= self.element_count():
                    raise OutOfRange(f"position {start} out of range")
                spine, _, in_leaf = self._descend_pos(start)
            skip_in_leaf = in_leaf
        for payload in self.iterate_leaves(spine):
            if self.kind is ChunkType.BLOB:
                piece = payload[skip_in_leaf:]
                skip_in_leaf = 0
                if piece:
                    yield piece
                continue
            elements = decode_elements(self.kind, payload)[skip_in_leaf:]
            skip_in_leaf = 0
            for e in elements:
                if start is not None and self.kind in _SORTED_KINDS:
                    if element_key(self.kind, e) < start:
                        continue
                yield e

    # -- descent helpers ------------------------------------------------------

    def _need_sorted(self):
        if self.kind not in _SORTED_KINDS:
            raise TypeMismatch(f"{self.kind.name} is not key-addressed")

    def _need_positional(self):
        if self.kind in _SORTED_KINDS:
            raise TypeMismatch(f"{self.kind.name} is not position-addressed")

    def _descend_pos(self, pos: int):
        """Spine to the leaf containing pos (rightmost leaf when pos == count)."""
        spine: dict[int, int] = {}
        chunk = self._get(self.root_cid)
        level = self.height() - 1
        cid = self.root_cid
        while chunk.type.is_index:
            entries = decode_entries(chunk.type, chunk.payload)
            idx = len(entries) - 1
            for i, e in enumerate(entries[:-1]):
                if pos < e.count:
                    idx = i
                    break
                pos -= e.count
            spine[level] = idx
            cid = entries[idx].cid
            chunk = self._get(cid)
            level -= 1
        return spine, (cid, chunk), pos

    def _descend_key(self, key: bytes):
        spine: dict[int, int] = {}
        cid = self.root_cid
        chunk = self._get(cid)
        level = self.height() - 1
        while chunk.type.is_index:
            entries = decode_entries(chunk.type, chunk.payload)
            keys = [e.key for e in entries]
            idx = bisect.bisect_left(keys, key)
            if idx == len(entries):
                idx -= 1  # key beyond every subtree: rightmost path
            spine[level] = idx
            cid = entries[idx].cid
            chunk = self._get(cid)
            level -= 1
        units = self._units_of_leaf(chunk)
        keys = [k for k, _ in units]
        i = bisect.bisect_left(keys, key)
        found = i < len(keys) and keys[i] == key
        return spine, (cid, chunk), i, found

    def _units_of_leaf(self, chunk: Chunk) -> list[tuple[bytes, bytes]]:
        out = []
        payload = chunk.payload
        pos = 0
        if self.kind is ChunkType.MAP:
            while pos < len(payload):
                klen = _U32.unpack_from(payload, pos)[0]
                key = payload[pos + 4 : pos + 4 + klen]
                vlen = _U32.unpack_from(payload, pos + 4 + klen)[0]
                end = pos + 8 + klen + vlen
                out.append((key, payload[pos:end]))
                pos = end
        else:
            while pos < len(payload):
                vlen = _U32.unpack_from(payload, pos)[0]
                end = pos + 4 + vlen
                out.append((payload[pos + 4 : end], payload[pos:end]))
                pos = end
        return out

    def _level_stream(self, level: int, spine: dict[int, int]) -> Iterator[Cid]:
        """Yield node cids at a level, starting at (and including) the spine node."""

        def rec(cid: Cid, lvl: int, on_spine: bool) -> Iterator[Cid]:
            if lvl == level:
                yield cid
                return
            chunk = self._get(cid)
            entries = decode_entries(chunk.type, chunk.payload)
            start = spine.get(lvl, 0) if on_spine else 0
            for i in range(start, len(entries)):
                yield from rec(entries[i].cid, lvl - 1, on_spine and i == start)

        yield from rec(self.root_cid, self.height() - 1, True)

    # -- updates ---------------------------------------------------------------

    def splice_bytes(self, offset: int, remove: int, insert: bytes = b"") -> "PosTree":
        """Blob edit: replace `remove` bytes at offset with `insert`."""
        if self.kind is not ChunkType.BLOB:
            raise TypeMismatch("splice_bytes applies to Blob trees")
        total = self.element_count()
        if offset < 0 or offset > total or remove < 0 or offset + remove > total:
            raise OutOfRange(f"byte range [{offset}, {offset + remove}) out of range")
        return _splice(self, offset, offset + remove, bytes(insert))

    def splice_items(self, start: int, stop: int, items: Sequence[bytes]) -> "PosTree":
        """List edit: replace elements [start, stop) with items."""
        if self.kind is not ChunkType.LIST:
            raise TypeMismatch("splice_items applies to List trees")
        total = self.element_count()
        if not 0 <= start <= stop <= total:
            raise OutOfRange(f"range [{start}, {stop}) out of range")
        units = [(bytes(v), encode_element(self.kind, bytes(v))) for v in items]
        return _splice(self, start, stop, units)

    def map_put(self, key: bytes, value: bytes) -> "PosTree":
        if self.kind is not ChunkType.MAP:
            raise TypeMismatch("map_put applies to Map trees")
        unit = (key, encode_element(self.kind, (key, value)))
        return _splice_sorted(self, key, unit, replace_existing=True)

    def map_delete(self, key: bytes) -> "PosTree":
        if self.kind is not ChunkType.MAP:
            raise TypeMismatch("map_delete applies to Map trees")
        return _splice_sorted(self, key, None, must_exist=True)

    def set_add(self, member: bytes) -> "PosTree":
        if self.kind is not ChunkType.SET:
            raise TypeMismatch("set_add applies to Set trees")
        return _splice_sorted(self, member, (member, encode_element(self.kind, member)))

    def set_discard(self, member: bytes) -> "PosTree":
        if self.kind is not ChunkType.SET:
            raise TypeMismatch("set_discard applies to Set trees")
        return _splice_sorted(self, member, None)

    # -- whole-content reads ----------------------------------------------------

    def content(self):
        """Materialize full logical content (bytes / list / set-list / dict)."""
        if self.kind is ChunkType.BLOB:
            return b"".join(self.iterate_leaves())
        elements = list(self.iterate())
        if self.kind is ChunkType.MAP:
            return dict(elements)
        if self.kind is ChunkType.SET:
            return elements  # sorted members
        return elements

    def diff(self, other: "PosTree"):
        return diff(self, other)


# --- incremental update -----------------------------------------------------
#
# Both splicers share one plan: pick the leaf whose span contains the edit,
# re-split from that leaf's left boundary with the edit applied, and stop at
# the first produced boundary that lands on an old leaf boundary (everything
# beyond it is reused verbatim; the detectors are windowed, so boundaries
# re-sync almost immediately). The same consume/re-split/re-sync step then
# carries the replacement entries up one index level at a time.


class _LevelFeed:
    """Pulls successive old nodes at one level, keeping units and boundaries.

    Units are bytes for Blob leaves, (key, encoded) pairs for other leaves,
    and IndexEntry objects for index levels. Boundaries are cumulative unit
    counts at each pulled node's end, i.e. the old split points.
    """

    def __init__(self, tree: PosTree, level: int, spine: dict[int, int]):
        self._iter = tree._level_stream(level, spine)
        self._tree = tree
        self.pulled: list = []
        self.boundaries: list[int] = []

    def pull(self):
        cid = next(self._iter, None)
        if cid is None:
            return None
        chunk = self._tree._get(cid)
        if chunk.type.is_index:
            units = decode_entries(chunk.type, chunk.payload)
        elif self._tree.kind is ChunkType.BLOB:
            units = chunk.payload
        else:
            units = self._tree._units_of_leaf(chunk)
        self.pulled.append(units)
        prev = self.boundaries[-1] if self.boundaries else 0
        self.boundaries.append(prev + len(units))
        return units

    def total(self) -> int:
        return self.boundaries[-1] if self.boundaries else 0

    def slice_from(self, offset: int) -> list:
        """Units from old offset to the current pulled end, as parts."""
        parts = []
        start = 0
        for units, end in zip(self.pulled, self.boundaries):
            if end > offset:
                parts.append(units[max(0, offset - start) :])
            start = end
        return parts


def _resplit_level(feed: _LevelFeed, prefix, replacement, drop_old, emit, split, join):
    """Re-split one level around an edit.

    prefix: units of the first affected node before the edit point;
    replacement: units taking the place of the dropped ones; drop_old: how
    many old units (beyond the prefix) the edit consumes. emit(units) stores
    one node and returns its parent entry. Returns (new_entries,
    consumed_node_count, exhausted).
    """
    edit_end = len(prefix) + len(replacement)
    consumed_old = len(prefix) + drop_old
    exhausted = False
    while feed.total() < consumed_old:
        if feed.pull() is None:
            raise OutOfRange("edit range runs past the end of the tree")
    region = join([prefix, replacement] + feed.slice_from(consumed_old))
    pull_budget = 1
    while True:
        groups = split(region)
        hit_stop = hit_nodes = None
        for g in groups:
            if g.reason == "tail":
                break  # not a content-closed boundary
            if g.stop < edit_end:
                continue
            old_pos = consumed_old + (g.stop - edit_end)
            i = bisect.bisect_left(feed.boundaries, old_pos)
            if i < len(feed.boundaries) and feed.boundaries[i] == old_pos:
                hit_stop, hit_nodes = g.stop, i + 1
                break
        if hit_stop is not None:
            entries = [emit(region[g.start : g.stop]) for g in groups if g.stop <= hit_stop]
            # A hit on the very last boundary leaves nothing to reuse; report
            # that as exhaustion so parents can collapse a lone root entry.
            more = hit_nodes < len(feed.pulled) or feed.pull() is not None
            return entries, hit_nodes, not more
        if exhausted:
            # An emptied region yields no entries at all; a full rebuild
            # would not emit an empty trailing node either, so the parent
            # level absorbs the disappearance.
            entries = [emit(region[g.start : g.stop]) for g in groups if g.stop > g.start]
            return entries, len(feed.pulled), True
        # No re-sync yet: extend the region with more old nodes and retry.
        # The pull budget doubles so repeated re-splits stay linear overall.
        added = []
        for _ in range(pull_budget):
            units = feed.pull()
            if units is None:
                exhausted = True
                break
            added.append(units)
        region = join([region] + added)
        pull_budget *= 2


def _leaf_tools(tree: PosTree):
    """(emit, split, join) operating on leaf units for tree's kind."""
    store, kind, cfg = tree.store, tree.kind, tree.config
    if kind is ChunkType.BLOB:

        def emit(units) -> IndexEntry:
            payload = bytes(units)
            return IndexEntry(store.put_chunk(Chunk(kind, payload)), count=len(payload))

        return emit, lambda region: split_bytes(region, cfg), lambda parts: b"".join(
            bytes(p) for p in parts
        )

    def emit(units: list) -> IndexEntry:
        payload = b"".join(enc for _, enc in units)
        cid = store.put_chunk(Chunk(kind, payload))
        return _entry_for_leaf(kind, cid, units, len(payload))

    def split(region):
        return split_elements([enc for _, enc in region], cfg)

    def join(parts):
        return [u for part in parts for u in part]

    return emit, split, join


def _index_tools(tree: PosTree):
    store, cfg = tree.store, tree.config
    itype = _INDEX_OF[tree.kind]

    def emit(units: list[IndexEntry]) -> IndexEntry:
        payload = b"".join(e.encode(itype) for e in units)
        return _entry_for_index(itype, store.put_chunk(Chunk(itype, payload)), units)

    def split(region):
        return split_index_entries(
            [e.cid for e in region], [len(e.encode(itype)) for e in region], cfg
        )

    def join(parts):
        return [u for part in parts for u in part]

    return emit, split, join


def _splice(tree: PosTree, start: int, stop: int, replacement) -> PosTree:
    """Positional splice: replacement is bytes (Blob) or unit pairs (List)."""
    spine, _leaf, in_leaf = tree._descend_pos(start)
    feed = _LevelFeed(tree, 0, spine)
    first_units = feed.pull()
    prefix = first_units[:in_leaf]
    emit, split, join = _leaf_tools(tree)
    new_entries, consumed, exhausted = _resplit_level(
        feed, prefix, replacement, stop - start, emit, split, join
    )
    return _propagate(tree, spine, new_entries, consumed, exhausted)


def _splice_sorted(
    tree: PosTree,
    key: bytes,
    unit: tuple[bytes, bytes] | None,
    replace_existing: bool = True,
    must_exist: bool = False,
) -> PosTree:
    """Point edit on a sorted tree: insert/replace (unit given) or delete."""
    spine, (_cid, leaf_chunk), in_leaf, found = tree._descend_key(key)
    if unit is None:
        if not found:
            if must_exist:
                raise ElementNotFound(key)
            return tree
        drop, replacement = 1, []
    elif found:
        if not replace_existing:
            return tree
        if tree._units_of_leaf(leaf_chunk)[in_leaf] == unit:
            return tree
        drop, replacement = 1, [unit]
    else:
        drop, replacement = 0, [unit]

    feed = _LevelFeed(tree, 0, spine)
    first_units = feed.pull()
    prefix = first_units[:in_leaf]
    emit, split, join = _leaf_tools(tree)
    new_entries, consumed, exhausted = _resplit_level(
        feed, prefix, replacement, drop, emit, split, join
    )
    return _propagate(tree, spine, new_entries, consumed, exhausted)


def _propagate(
    tree: PosTree,
    spine: dict[int, int],
    new_entries: list[IndexEntry],
    consumed_nodes: int,
    exhausted: bool,
) -> PosTree:
    """Carry replacement entries level by level up to a single root."""
    store, kind, cfg = tree.store, tree.kind, tree.config
    height = tree.height()
    emit, split, join = _index_tools(tree)

    for level in range(1, height):
        left_intact = any(spine.get(lvl, 0) > 0 for lvl in range(level, height))
        if exhausted and not left_intact and len(new_entries) == 1:
            # The single new node holds everything: it is the new root.
            return PosTree(store, kind, new_entries[0].cid, cfg, _height=level)
        feed = _LevelFeed(tree, level, spine)
        first_units = feed.pull()
        prefix = first_units[: spine.get(level, 0)]
        new_entries, consumed_nodes, exhausted = _resplit_level(
            feed, prefix, new_entries, consumed_nodes, emit, split, join
        )

    if not new_entries:
        # Every element was spliced away: the canonical form of an empty
        # tree is a single empty leaf.
        return PosTree(store, kind, _put_leaf(store, kind, b""), cfg, _height=1)
    if len(new_entries) == 1:
        return PosTree(store, kind, new_entries[0].cid, cfg, _height=height)
    root, h = _build_up(store, kind, new_entries, cfg, base_height=height)
    return PosTree(store, kind, root, cfg, _height=h)


# --- diff ---------------------------------------------------------------------
#
# Equal content shares chunks, so two versions of one value agree on most
# leaf cids and a diff only needs to decode the leaves unique to each side.


@dataclass(frozen=True)
class MapDiff:
    added: dict
    removed: dict
    changed: dict  # key -> (old value, new value)

    def __bool__(self) -> bool:
        return bool(self.added or self.removed or self.changed)

    @property
    def touched_keys(self) -> set:
        return set(self.added) | set(self.removed) | set(self.changed)


@dataclass(frozen=True)
class SetDiff:
    added: list
    removed: list

    def __bool__(self) -> bool:
        return bool(self.added or self.removed)

    @property
    def touched_keys(self) -> set:
        return set(self.added) | set(self.removed)


@dataclass(frozen=True)
class SpliceOp:
    """Replace a's span [start, stop) with items (bytes or element list)."""

    start: int
    stop: int
    items: bytes | list

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.stop)


# SequenceMatcher is quadratic in the worst case; beyond this many elements
# per side the middle is reported as one coarse replacement instead.
_REFINE_CAP = 3000


def _leaf_cids(tree: PosTree) -> list[Cid]:
    return list(tree._level_stream(0, {}))


def _diff_keyed(a: PosTree, b: PosTree):
    """Sorted-kind diff via leaf cid sets plus a two-pointer element merge."""
    cids_a, cids_b = _leaf_cids(a), _leaf_cids(b)
    set_a, set_b = set(cids_a), set(cids_b)
    units_a = [u for cid in cids_a if cid not in set_b for u in a._units_of_leaf(a._get(cid))]
    units_b = [u for cid in cids_b if cid not in set_a for u in b._units_of_leaf(b._get(cid))]

    added, removed, changed = {}, {}, {}
    i = j = 0
    while i < len(units_a) or j < len(units_b):
        if j == len(units_b) or (i < len(units_a) and units_a[i][0] < units_b[j][0]):
            key = units_a[i][0]
            removed[key] = units_a[i]
            i += 1
        elif i == len(units_a) or units_b[j][0] < units_a[i][0]:
            key = units_b[j][0]
            added[key] = units_b[j]
            j += 1
        else:
            if units_a[i][1] != units_b[j][1]:
                changed[units_a[i][0]] = (units_a[i], units_b[j])
            i += 1
            j += 1

    if a.kind is ChunkType.MAP:
        dec = lambda unit: decode_elements(ChunkType.MAP, unit[1])[0][1]
        return MapDiff(
            added={k: dec(u) for k, u in added.items()},
            removed={k: dec(u) for k, u in removed.items()},
            changed={k: (dec(old), dec(new)) for k, (old, new) in changed.items()},
        )
    # Set members never "change": equal keys are equal elements.
    return SetDiff(added=sorted(added), removed=sorted(removed))


def _leaf_spans(tree: PosTree) -> list[tuple[Cid, int]]:
    """(leaf cid, element count) in order, fetching index levels only."""
    if tree.height() == 1:
        chunk = tree._get(tree.root_cid)
        n = len(chunk.payload) if tree.kind is ChunkType.BLOB else len(
            decode_elements(tree.kind, chunk.payload)
        )
        return [(tree.root_cid, n)]
    spans = []
    for cid in tree._level_stream(1, {}):
        chunk = tree._get(cid)
        spans.extend((e.cid, e.count) for e in decode_entries(chunk.type, chunk.payload))
    return spans


def _diff_positional(a: PosTree, b: PosTree) -> list[SpliceOp]:
    """Splice script turning a's content into b's.

    Shared leaves at both ends are stripped without fetching them; the
    differing middles are decoded and refined element by element when small
    enough, otherwise reported as one replacement.
    """
    spans_a, spans_b = _leaf_spans(a), _leaf_spans(b)
    lo = 0
    while lo < len(spans_a) and lo < len(spans_b) and spans_a[lo][0] == spans_b[lo][0]:
        lo += 1
    hi = 0
    while (
        hi < len(spans_a) - lo
        and hi < len(spans_b) - lo
        and spans_a[-1 - hi][0] == spans_b[-1 - hi][0]
    ):
        hi += 1

    def middle(tree: PosTree, spans):
        chosen = spans[lo : len(spans) - hi]
        if tree.kind is ChunkType.BLOB:
            return b"".join(tree._get(cid).payload for cid, _ in chosen)
        out = []
        for cid, _ in chosen:
            out.extend(decode_elements(tree.kind, tree._get(cid).payload))
        return out

    offset = sum(n for _, n in spans_a[:lo])
    mid_a, mid_b = middle(a, spans_a), middle(b, spans_b)
    if mid_a == mid_b:
        return []
    if max(len(mid_a), len(mid_b)) > _REFINE_CAP:
        return [SpliceOp(offset, offset + len(mid_a), mid_b)]
    ops = []
    matcher = SequenceMatcher(a=mid_a, b=mid_b, autojunk=False)
    for tag, i1, i2, j1, j2 in matcher.get_opcodes():
        if tag != "equal":
            ops.append(SpliceOp(offset + i1, offset + i2, mid_b[j1:j2]))
    return ops


def diff(a: PosTree, b: PosTree):
    """Difference between two trees of the same kind (a is the base)."""
    if a.kind is not b.kind:
        raise TypeMismatch(f"cannot diff {a.kind.name} against {b.kind.name}")
    if a.kind in _SORTED_KINDS:
        return _diff_keyed(a, b)
    return _diff_positional(a, b)


def apply_map_diff(tree: PosTree, d: MapDiff) -> PosTree:
    for key in d.removed:
        tree = tree.map_delete(key)
    for key, (_, new) in d.changed.items():
        tree = tree.map_put(key, new)
    for key, value in d.added.items():
        tree = tree.map_put(key, value)
    return tree


def apply_set_diff(tree: PosTree, d: SetDiff) -> PosTree:
    for member in d.removed:
        tree = tree.set_discard(member)
    for member in d.added:
        tree = tree.set_add(member)
    return tree


def apply_splices(tree: PosTree, ops: Sequence[SpliceOp]) -> PosTree:
    """Apply splice ops; positions refer to the original tree, so apply
    right to left."""
    for op in sorted(ops, key=lambda o: o.start, reverse=True):
        if tree.kind is ChunkType.BLOB:
            tree = tree.splice_bytes(op.start, op.stop - op.start, bytes(op.items))
        else:
            tree = tree.splice_items(op.start, op.stop, list(op.items))
    return tree

