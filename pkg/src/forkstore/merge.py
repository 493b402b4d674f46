"""Three-way merge of value trees.

Both sides are diffed against the common base at the content level: keyed
kinds compare per key, positional kinds compare as splice scripts. Edits
touching disjoint keys or spans combine freely; identical edits collapse to
one; anything else is a conflict handed to the resolver, and whatever the
resolver declines is returned for the caller to surface. Set merges cannot
conflict at all (an element can only be added where the base lacked it and
removed where the base had it, never both).

The merged tree is produced by replaying the combined edits onto the base
tree, so unchanged regions keep their chunks and the result is identical to
what a from-scratch build of the merged content would produce.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

from .chunks import ChunkType
from .errors import ElementNotFound, TypeMismatch
from .postree import PosTree, SpliceOp, apply_splices, diff

_SORTED_KINDS = (ChunkType.SET, ChunkType.MAP)


@dataclass(frozen=True)
class KeyConflict:
    """Both sides edited one key differently. None means absent."""

    key: bytes
    base: bytes | None
    ours: bytes | None
    theirs: bytes | None


@dataclass(frozen=True)
class SpanConflict:
    """Overlapping positional edits. Spans are in base coordinates."""

    start: int
    stop: int
    base: bytes | list
    ours_ops: tuple[SpliceOp, ...]
    theirs_ops: tuple[SpliceOp, ...]


def _counter_merge(base: bytes | None, ours: bytes, theirs: bytes) -> bytes:
    """Default aggregate: ASCII integers, both deltas applied to the base."""
    b = int(base) if base else 0
    return b"%d" % (int(ours) + int(theirs) - b)


@dataclass(frozen=True)
class Resolver:
    """Conflict policy applied during a merge.

    ours/theirs pick one side wholesale. append keeps both contributions
    (concatenated values for keys, both insertions at a shared point for
    positional kinds). aggregate recomputes the value from both sides, by
    default treating values as ASCII counters. custom delegates every
    conflict to a callable that returns a resolution or None to decline.
    """

    strategy: str
    fn: Callable | None = None

    @classmethod
    def ours(cls) -> "Resolver":
        return cls("ours")

    @classmethod
    def theirs(cls) -> "Resolver":
        return cls("theirs")

    @classmethod
    def append(cls) -> "Resolver":
        return cls("append")

    @classmethod
    def aggregate(cls, fn: Callable | None = None) -> "Resolver":
        return cls("aggregate", fn or _counter_merge)

    @classmethod
    def custom(cls, fn: Callable) -> "Resolver":
        return cls("custom", fn)

    def resolve_key(self, c: KeyConflict):
        """(present, value) for the merged state of c.key, or None to decline."""
        if self.strategy == "ours":
            return (c.ours is not None, c.ours)
        if self.strategy == "theirs":
            return (c.theirs is not None, c.theirs)
        if self.strategy == "append":
            parts = [v for v in (c.ours, c.theirs) if v is not None]
            return (True, b"".join(parts)) if parts else (False, None)
        if self.strategy == "aggregate":
            if c.ours is None or c.theirs is None:
                return None  # cannot aggregate a deletion
            try:
                return (True, self.fn(c.base, c.ours, c.theirs))
            except (ValueError, TypeError):
                return None
        if self.strategy == "custom":
            return self.fn(c)
        return None

    def resolve_span(self, c: SpanConflict):
        """Replacement ops for the contested span, or None to decline."""
        if self.strategy == "ours":
            return list(c.ours_ops)
        if self.strategy == "theirs":
            return list(c.theirs_ops)
        if self.strategy == "append":
            ops = list(c.ours_ops) + list(c.theirs_ops)
            if all(op.start == op.stop == c.start for op in ops):
                merged = ops[0].items[:0]  # empty bytes or empty list
                for op in ops:
                    merged = merged + op.items
                return [SpliceOp(c.start, c.start, merged)]
            return None  # appending only makes sense for a shared insert point
        if self.strategy == "custom":
            return self.fn(c)
        return None


# --- keyed merge -----------------------------------------------------------------


def _map_edits(d) -> dict:
    """Per-key edits as key -> (present, value)."""
    edits = {}
    for k, v in d.added.items():
        edits[k] = (True, v)
    for k, (_, new) in d.changed.items():
        edits[k] = (True, new)
    for k in d.removed:
        edits[k] = (False, None)
    return edits


def _merge_map(base: PosTree, ours: PosTree, theirs: PosTree, resolver):
    da, db = diff(base, ours), diff(base, theirs)
    ea, eb = _map_edits(da), _map_edits(db)
    merged = base
    conflicts = []
    for k in sorted(set(ea) | set(eb)):
        if k not in eb:
            winner = ea[k]
        elif k not in ea:
            winner = eb[k]
        elif ea[k] == eb[k]:
            winner = ea[k]
        else:
            if k in da.removed:
                base_val = da.removed[k]
            elif k in da.changed:
                base_val = da.changed[k][0]
            elif k in db.removed:
                base_val = db.removed[k]
            elif k in db.changed:
                base_val = db.changed[k][0]
            else:
                base_val = None
            c = KeyConflict(k, base_val, ea[k][1], eb[k][1])
            winner = resolver.resolve_key(c) if resolver else None
            if winner is None:
                conflicts.append(c)
                continue
        present, value = winner
        if present:
            merged = merged.map_put(k, value)
        else:
            try:
                merged = merged.map_delete(k)
            except ElementNotFound:
                pass  # a resolver may decide "absent" for a key the base lacks
    return (merged if not conflicts else None), conflicts


def _merge_set(base: PosTree, ours: PosTree, theirs: PosTree):
    da, db = diff(base, ours), diff(base, theirs)
    merged = base
    for m in set(da.removed) | set(db.removed):
        merged = merged.set_discard(m)
    for m in set(da.added) | set(db.added):
        merged = merged.set_add(m)
    return merged, []


# --- positional merge ---------------------------------------------------------------


def _ops_overlap(a: SpliceOp, b: SpliceOp) -> bool:
    if a.start < b.stop and b.start < a.stop:
        return True
    # Two insertions at one point have no union span but still collide:
    # there is no content-defined order between them.
    return a.start == a.stop == b.start == b.stop


def _merge_positional(base: PosTree, ours: PosTree, theirs: PosTree, resolver):
    tagged = [(op, 0) for op in diff(base, ours)] + [(op, 1) for op in diff(base, theirs)]
    tagged.sort(key=lambda t: (t[0].start, t[0].stop))

    # Group transitively overlapping ops into clusters.
    clusters: list[list[tuple[SpliceOp, int]]] = []
    for op, side in tagged:
        if clusters and any(_ops_overlap(op, prev) for prev, _ in clusters[-1]):
            clusters[-1].append((op, side))
        else:
            clusters.append([(op, side)])

    merged_ops: list[SpliceOp] = []
    conflicts = []
    for cluster in clusters:
        ours_ops = tuple(op for op, side in cluster if side == 0)
        theirs_ops = tuple(op for op, side in cluster if side == 1)
        if not theirs_ops or not ours_ops:
            merged_ops.extend(op for op, _ in cluster)
            continue
        if ours_ops == theirs_ops:
            merged_ops.extend(ours_ops)
            continue
        lo = min(op.start for op, _ in cluster)
        hi = max(op.stop for op, _ in cluster)
        if base.kind is ChunkType.BLOB:
            contested = base.read(lo, hi - lo)
        else:
            contested = [base.get_at(i) for i in range(lo, hi)]
        c = SpanConflict(lo, hi, contested, ours_ops, theirs_ops)
        resolution = resolver.resolve_span(c) if resolver else None
        if resolution is None:
            conflicts.append(c)
        else:
            merged_ops.extend(resolution)
    if conflicts:
        return None, conflicts
    return apply_splices(base, merged_ops), []


def merge_trees(base: PosTree, ours: PosTree, theirs: PosTree, resolver: Resolver | None = None):
    """Merge two descendants of base; returns (tree, conflicts).

    On any unresolved conflict the tree is None and nothing about the inputs
    has changed; chunks written while attempting the merge are unreferenced
    and harmless.
    """
    if not (base.kind is ours.kind is theirs.kind):
        raise TypeMismatch(
            f"merge across kinds: {base.kind.name}/{ours.kind.name}/{theirs.kind.name}"
        )
    if base.kind is ChunkType.MAP:
        return _merge_map(base, ours, theirs, resolver)
    if base.kind is ChunkType.SET:
        return _merge_set(base, ours, theirs)
    return _merge_positional(base, ours, theirs, resolver)
