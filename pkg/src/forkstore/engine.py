"""Embedded storage engine: branched, versioned, typed values under keys.

This is the whole public surface in one object. Reads resolve a branch head
or an explicit version uid and hand back a lazy object; writes commit a new
version derived from the head (or from any base, forking on conflict) and
move the head atomically. Merges run the three-way algorithm over the two
heads and their deepest shared ancestor. Everything below (trees, chunk
log, branch tables) stays internal.

The same class also serves as the per-instance execution core in cluster
mode, with the chunk store and branch tables injected, so embedded and
clustered deployments produce bit-identical versions for the same calls.
"""

from __future__ import annotations

import csv
import io
import json
import os
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

from .branches import BranchManager
from .chunking import ChunkerConfig, DEFAULT_CONFIG
from .chunks import CID_SIZE, ChunkType, Cid
from .errors import (
    BranchNotFound,
    GuardMismatch,
    KeyMismatch,
    KeyNotFound,
    FormatError,
    NoCommonAncestor,
    ObjectNotFound,
    SchemaError,
    TamperDetected,
    TypeMismatch,
    UnresolvedConflicts,
)
from .merge import Resolver, merge_trees
from .postree import PosTree, decode_entries, diff as tree_diff
from .store import ChunkStore, VerifyingStore
from .values import (
    Handle,
    ValueKind,
    decode_primitive,
    decode_tuple,
    encode_primitive,
    encode_tuple,
    handle_for,
    integer_add,
    load_value,
    persist_value,
)
from .versions import Version, commit_version, find_lca, load_version, track as track_versions

MANIFEST_NAME = "manifest.json"
_MANIFEST_FORMAT = 1


def _chunker_to_dict(cfg: ChunkerConfig) -> dict:
    return {
        "window_size": cfg.window_size,
        "target_leaf_bytes": cfg.target_leaf_bytes,
        "target_index_bytes": cfg.target_index_bytes,
        "max_size_factor": cfg.max_size_factor,
        "index_entry_estimate": cfg.index_entry_estimate,
        "leaf_bits": cfg.leaf_bits,
        "index_bits": cfg.index_bits,
    }


def _chunker_from_dict(d: dict) -> ChunkerConfig:
    try:
        return ChunkerConfig(**d)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"bad chunker settings: {exc}") from None


@dataclass(frozen=True)
class EngineConfig:
    """Settings fixed at store creation; reopening reads them back."""

    chunker: ChunkerConfig = DEFAULT_CONFIG
    digest_algo: str = "sha256"
    default_branch: str = "master"

    def to_dict(self) -> dict:
        return {
            "format": _MANIFEST_FORMAT,
            "digest": self.digest_algo,
            "default_branch": self.default_branch,
            "chunker": _chunker_to_dict(self.chunker),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EngineConfig":
        if d.get("format") != _MANIFEST_FORMAT:
            raise FormatError(f"unsupported manifest format: {d.get('format')!r}")
        try:
            return cls(
                chunker=_chunker_from_dict(d["chunker"]),
                digest_algo=d["digest"],
                default_branch=d["default_branch"],
            )
        except KeyError as exc:
            raise FormatError(f"manifest missing field {exc}") from None


def _read_manifest(path: str) -> EngineConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return EngineConfig.from_dict(json.load(fh))
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest {path}: {exc}") from None


def _write_manifest(path: str, config: EngineConfig) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def as_key(key) -> bytes:
    if isinstance(key, str):
        return key.encode("utf-8")
    if isinstance(key, (bytes, bytearray, memoryview)):
        return bytes(key)
    raise TypeError(f"key must be bytes or str, not {type(key).__name__}")


def check_branch_name(name: str) -> str:
    if not isinstance(name, str):
        raise TypeError(f"branch name must be str, not {type(name).__name__}")
    raw = name.encode("utf-8")
    if not 1 <= len(raw) <= 255:
        raise ValueError("branch name must be 1-255 encoded bytes")
    if any(b < 0x20 or b == 0x7F for b in raw):
        raise ValueError("branch name must not contain control characters")
    return name


class FObject:
    """One loaded version. Chunkable values are fetched lazily through it."""

    __slots__ = ("uid", "key", "kind", "data", "depth", "bases", "context", "_store", "_config")

    def __init__(self, store, config: ChunkerConfig, uid: Cid, version: Version):
        self.uid = uid
        self.key = version.key
        self.kind = ValueKind(version.kind)
        self.data = version.data
        self.depth = version.depth
        self.bases = version.bases
        self.context = version.context
        self._store = store
        self._config = config

    @property
    def is_chunkable(self) -> bool:
        return self.kind.is_chunkable

    def tree(self) -> PosTree:
        return PosTree(self._store, self.kind.chunk_type, self.data, self._config)

    def handle(self) -> Handle:
        """Editable view; mutations stay uncommitted until put under a key."""
        return handle_for(self._store, self.kind, self.data, self._config)

    def value(self):
        return load_value(self._store, self.kind, self.data, self._config)

    def __eq__(self, other) -> bool:
        return isinstance(other, FObject) and self.uid == other.uid

    def __hash__(self):
        return hash(self.uid)

    def __repr__(self) -> str:
        return f"FObject({self.key!r}, {self.kind.name}, uid={self.uid.hex()[:12]})"


@dataclass(frozen=True)
class PrimitiveDiff:
    """Whole-value comparison of two primitive versions."""

    old: object
    new: object

    def __bool__(self) -> bool:
        return self.old != self.new


@dataclass(frozen=True)
class ValueConflict:
    """Both sides changed one primitive value in different ways."""

    base: object
    ours: object
    theirs: object


# --- three-way content merge -------------------------------------------------
#
# Shared by the embedded facade and the cluster servlets so both commit the
# same bytes for the same inputs.


def _merge_primitive(kind: ValueKind, base, ours, theirs, resolver: Resolver | None):
    conflict = ValueConflict(base, ours, theirs)
    if resolver is None:
        raise UnresolvedConflicts([conflict])
    s = resolver.strategy
    if s == "ours":
        return ours
    if s == "theirs":
        return theirs
    if s == "append":
        if kind is ValueKind.STRING:
            return ours + theirs
        if kind is ValueKind.TUPLE:
            return tuple(ours) + tuple(theirs)
    elif s == "aggregate":
        if kind is ValueKind.INTEGER:
            # both deltas applied to the base: base + (o-b) + (t-b)
            return integer_add(integer_add(ours, theirs), -base)
    elif s == "custom":
        merged = resolver.fn(conflict)
        if merged is not None:
            return merged
    raise UnresolvedConflicts([conflict])


def merge_version_contents(
    store,
    config: ChunkerConfig,
    base_uid: Cid,
    ours_uid: Cid,
    theirs_uid: Cid,
    resolver: Resolver | None = None,
) -> tuple[ValueKind, bytes]:
    """Merged (kind, data) of two versions over their common ancestor.

    Raises UnresolvedConflicts without touching any branch state; chunks
    written for a failed attempt stay unreferenced.
    """
    vb = load_version(store, base_uid)
    vo = load_version(store, ours_uid)
    vt = load_version(store, theirs_uid)
    kind = ValueKind(vo.kind)
    if not (vb.kind == vo.kind == vt.kind):
        raise TypeMismatch("versions in a merge must share one value kind")
    if vo.data == vt.data:
        return kind, vo.data
    if vo.data == vb.data:
        return kind, vt.data
    if vt.data == vb.data:
        return kind, vo.data
    if kind.is_chunkable:
        ct = kind.chunk_type
        merged, conflicts = merge_trees(
            PosTree(store, ct, vb.data, config),
            PosTree(store, ct, vo.data, config),
            PosTree(store, ct, vt.data, config),
            resolver,
        )
        if merged is None:
            raise UnresolvedConflicts(conflicts)
        return kind, merged.root_cid
    merged_value = _merge_primitive(
        kind,
        decode_primitive(kind, vb.data),
        decode_primitive(kind, vo.data),
        decode_primitive(kind, vt.data),
        resolver,
    )
    return kind, encode_primitive(kind, merged_value)


class Engine:
    """Facade over one store directory (or injected cluster-mode parts)."""

    def __init__(
        self,
        path: str | os.PathLike | None = None,
        config: EngineConfig | None = None,
        *,
        store=None,
        branches: BranchManager | None = None,
    ):
        if store is None or branches is None:
            if path is None:
                raise TypeError("a store path is required unless parts are injected")
            path = os.fspath(path)
            os.makedirs(path, exist_ok=True)
            manifest = os.path.join(path, MANIFEST_NAME)
            if os.path.exists(manifest):
                stored = _read_manifest(manifest)
                if config is not None and config != stored:
                    raise FormatError(
                        f"store at {path} was created with different settings; "
                        f"open it without passing a config"
                    )
                config = stored
            else:
                config = config or EngineConfig()
                _write_manifest(manifest, config)
        self.path = os.fspath(path) if path is not None else None
        self.config = config or EngineConfig()
        check_branch_name(self.config.default_branch)
        self._store = store if store is not None else ChunkStore(path, self.config.digest_algo)
        self._branches = branches if branches is not None else BranchManager(path)
        self._locks: dict[bytes, threading.Lock] = {}
        self._locks_guard = threading.Lock()
        self._closed = False

    # -- plumbing ---------------------------------------------------------------

    @property
    def store(self):
        return self._store

    @property
    def branch_tables(self) -> BranchManager:
        return self._branches

    def _key_lock(self, key: bytes) -> threading.Lock:
        with self._locks_guard:
            lock = self._locks.get(key)
            if lock is None:
                lock = self._locks[key] = threading.Lock()
            return lock

    def _wrap(self, uid: Cid, version: Version) -> FObject:
        return FObject(self._store, self.config.chunker, uid, version)

    def _load_for_key(self, key: bytes, uid: Cid) -> Version:
        v = load_version(self._store, uid)
        if v.key != key:
            raise KeyMismatch(
                f"version {uid.hex()[:12]} belongs to key {v.key!r}, not {key!r}"
            )
        return v

    def resolve(self, key, branch: str | None = None, uid: Cid | None = None) -> tuple[Cid, Version]:
        """(uid, record) named by a branch head or an explicit uid."""
        key = as_key(key)
        if uid is not None:
            if branch is not None:
                raise TypeError("pass a branch or a uid, not both")
            return uid, self._load_for_key(key, uid)
        if not self._branches.has_key(key):
            raise KeyNotFound(f"key {key!r} has no versions")
        return self._resolve_branch(key, branch or self.config.default_branch)

    def _resolve_branch(self, key: bytes, branch: str) -> tuple[Cid, Version]:
        head = self._branches.head(key, branch)
        return head, load_version(self._store, head)

    # -- reads ------------------------------------------------------------------

    def get(self, key, branch: str | None = None, uid: Cid | None = None) -> FObject:
        """Load a version: the default head, a named head, or an exact uid."""
        uid, version = self.resolve(key, branch, uid)
        return self._wrap(uid, version)

    def list_keys(self) -> list[bytes]:
        return self._branches.keys()

    def list_branches(self, key) -> dict[str, Cid]:
        return self._branches.branches(as_key(key))

    def list_untagged(self, key) -> list[Cid]:
        return self._branches.untagged_heads(as_key(key))

    def track(self, key, branch: str | None = None, uid: Cid | None = None,
              distance: tuple[int, int | None] = (0, None)) -> list[FObject]:
        """History of a version, nearest first, hop count within `distance`."""
        lo, hi = distance
        if lo < 0 or (hi is not None and hi < lo):
            raise ValueError(f"bad distance range [{lo}, {hi}]")
        start, _ = self.resolve(key, branch, uid)
        entries = track_versions(self._store, start, max_hops=hi)
        return [self._wrap(e.uid, e.version) for e in entries if e.hops >= lo]

    def lca(self, key, uid_a: Cid, uid_b: Cid) -> Cid | None:
        key = as_key(key)
        self._load_for_key(key, uid_a)
        self._load_for_key(key, uid_b)
        return find_lca(self._store, uid_a, uid_b)

    def diff_versions(self, uid_a: Cid, uid_b: Cid):
        """Typed difference between two versions of the same kind.

        Keys may differ; the comparison is over content alone. Chunkable
        kinds return the tree diff, primitives an old/new report.
        """
        va = load_version(self._store, uid_a)
        vb = load_version(self._store, uid_b)
        if va.kind != vb.kind:
            raise TypeMismatch(
                f"cannot diff {ValueKind(va.kind).name} against {ValueKind(vb.kind).name}"
            )
        kind = ValueKind(va.kind)
        if kind.is_chunkable:
            ct = kind.chunk_type
            return tree_diff(
                PosTree(self._store, ct, va.data, self.config.chunker),
                PosTree(self._store, ct, vb.data, self.config.chunker),
            )
        return PrimitiveDiff(
            decode_primitive(kind, va.data), decode_primitive(kind, vb.data)
        )

    # -- writes -----------------------------------------------------------------

    def put(self, key, value, branch: str | None = None, guard: Cid | None = None,
            context: bytes = b"") -> Cid:
        """Commit a new version on a named branch and move its head.

        The default branch is created by its first put; any other branch
        must already exist. With `guard`, the head must still equal it, so
        concurrent writers detect each other instead of silently racing.
        """
        key = as_key(key)
        branch = check_branch_name(branch or self.config.default_branch)
        with self._key_lock(key):
            head = self._branches.branches(key).get(branch)
            if head is None and branch != self.config.default_branch:
                raise BranchNotFound(f"{branch!r} on key {key!r}")
            if guard is not None and head != guard:
                raise GuardMismatch(branch, head)
            uid = self._commit_value(key, value, (head,) if head is not None else (), context)
            if head is None:
                self._branches.set_head(key, branch, uid)
            else:
                self._branches.set_head(key, branch, uid, guard=head)
        return uid

    def put_unconflicted(self, key, value, base: Cid | None = None, context: bytes = b"") -> Cid:
        """Commit on top of any base version without naming a branch.

        Concurrent writers from one base each get their own head; the set
        of untagged heads grows instead of failing, and a merge shrinks it.
        """
        key = as_key(key)
        with self._key_lock(key):
            bases: tuple[Cid, ...] = ()
            if base is not None:
                self._load_for_key(key, base)
                bases = (base,)
            uid = self._commit_value(key, value, bases, context)
            self._branches.advance_untagged(key, uid, bases=bases)
        return uid

    def _commit_value(self, key: bytes, value, bases: tuple[Cid, ...], context: bytes) -> Cid:
        kind, data = persist_value(self._store, value, self.config.chunker)
        for base in bases:
            base_kind = load_version(self._store, base).kind
            if base_kind != kind:
                raise TypeMismatch(
                    f"a version chain keeps one kind: base is "
                    f"{ValueKind(base_kind).name}, new value is {kind.name}"
                )
        return commit_version(self._store, key, kind, data, bases=bases, context=context)

    def fork(self, key, new_branch: str, ref_branch: str | None = None,
             ref_uid: Cid | None = None) -> Cid:
        """Point a new branch name at an existing version; writes no chunks."""
        key = as_key(key)
        check_branch_name(new_branch)
        if ref_branch is not None and ref_uid is not None:
            raise TypeError("fork from a branch or a uid, not both")
        with self._key_lock(key):
            if ref_uid is not None:
                self._load_for_key(key, ref_uid)
                self._branches.set_head(key, new_branch, ref_uid)
                return ref_uid
            return self._branches.fork(key, ref_branch or self.config.default_branch, new_branch)

    def rename_branch(self, key, branch: str, new_name: str) -> None:
        key = as_key(key)
        check_branch_name(new_name)
        with self._key_lock(key):
            self._branches.rename(key, branch, new_name)

    def remove_branch(self, key, branch: str) -> None:
        with self._key_lock(as_key(key)):
            self._branches.remove(as_key(key), branch)

    # -- merges -----------------------------------------------------------------

    def merge(self, key, target_branch: str, ref_branch: str | None = None,
              ref_uid: Cid | None = None, resolver: Resolver | None = None,
              context: bytes = b"") -> Cid:
        """Three-way merge of another head (or version) into a named branch.

        Only the target branch moves. On conflict nothing moves and the
        conflict list rides on the raised error.
        """
        key = as_key(key)
        if (ref_branch is None) == (ref_uid is None):
            raise TypeError("pass exactly one of ref_branch or ref_uid")
        with self._key_lock(key):
            target_head = self._branches.head(key, target_branch)
            if ref_branch is not None:
                ref_head = self._branches.head(key, ref_branch)
            else:
                ref_head = ref_uid
                self._load_for_key(key, ref_head)
            uid = self._merge_commit(key, target_head, ref_head, resolver, context)
            self._branches.set_head(key, target_branch, uid, guard=target_head)
        return uid

    def merge_versions(self, key, uids: Sequence[Cid], resolver: Resolver | None = None,
                       context: bytes = b"") -> Cid:
        """Fold two or more version heads into one, retiring them as heads."""
        key = as_key(key)
        uids = list(uids)
        if len(uids) < 2:
            raise ValueError("need at least two versions to merge")
        for uid in uids:
            self._load_for_key(key, uid)
        with self._key_lock(key):
            acc_uid = uids[0]
            acc_data = None  # (kind, data) once the fold has produced new content
            merged_so_far = [uids[0]]
            for nxt in uids[1:]:
                base = self._deepest_common_ancestor(merged_so_far, nxt)
                if acc_data is None:
                    kind, data = merge_version_contents(
                        self._store, self.config.chunker, base, acc_uid, nxt, resolver
                    )
                else:
                    kind, data = self._merge_onto_content(acc_data, base, nxt, resolver)
                acc_data = (kind, data)
                merged_so_far.append(nxt)
            kind, data = acc_data
            uid = commit_version(self._store, key, kind, data, bases=tuple(uids), context=context)
            self._branches.advance_untagged(key, uid, bases=tuple(uids))
        return uid

    def _merge_onto_content(self, acc: tuple[ValueKind, bytes], base_uid: Cid,
                            theirs_uid: Cid, resolver: Resolver | None) -> tuple[ValueKind, bytes]:
        # Fold step past the first: ours is unfinished content, not a version.
        kind, ours_data = acc
        vb = load_version(self._store, base_uid)
        vt = load_version(self._store, theirs_uid)
        if not (vb.kind == vt.kind == kind):
            raise TypeMismatch("versions in a merge must share one value kind")
        if ours_data == vt.data or vt.data == vb.data:
            return kind, ours_data
        if ours_data == vb.data:
            return kind, vt.data
        if kind.is_chunkable:
            ct = kind.chunk_type
            cfg = self.config.chunker
            merged, conflicts = merge_trees(
                PosTree(self._store, ct, vb.data, cfg),
                PosTree(self._store, ct, ours_data, cfg),
                PosTree(self._store, ct, vt.data, cfg),
                resolver,
            )
            if merged is None:
                raise UnresolvedConflicts(conflicts)
            return kind, merged.root_cid
        merged_value = _merge_primitive(
            kind,
            decode_primitive(kind, vb.data),
            decode_primitive(kind, ours_data),
            decode_primitive(kind, vt.data),
            resolver,
        )
        return kind, encode_primitive(kind, merged_value)

    def _deepest_common_ancestor(self, uids: list[Cid], other: Cid) -> Cid:
        best = None
        for uid in uids:
            lca = find_lca(self._store, uid, other)
            if lca is None:
                continue
            depth = load_version(self._store, lca).depth
            if best is None or depth > best[0] or (depth == best[0] and lca < best[1]):
                best = (depth, lca)
        if best is None:
            raise NoCommonAncestor("versions share no history")
        return best[1]

    def _merge_commit(self, key: bytes, ours: Cid, theirs: Cid,
                      resolver: Resolver | None, context: bytes) -> Cid:
        if ours == theirs:
            v = load_version(self._store, ours)
            return commit_version(self._store, key, v.kind, v.data, bases=(ours,), context=context)
        base = find_lca(self._store, ours, theirs)
        if base is None:
            raise NoCommonAncestor("versions share no history")
        kind, data = merge_version_contents(
            self._store, self.config.chunker, base, ours, theirs, resolver
        )
        return commit_version(
            self._store, key, kind, data, bases=(ours, theirs), context=context
        )

    # -- integrity --------------------------------------------------------------

    def verify(self, key=None, branch: str | None = None, uid: Cid | None = None,
               max_hops: int | None = None) -> int:
        """Recompute every digest along a version's history.

        Walks the base graph from the named version, re-hashing each record
        and every chunk under each value root. Returns the number of
        versions checked; raises TamperDetected on the first altered byte.
        """
        if uid is None:
            uid, _ = self.resolve(key, branch)
        vstore = VerifyingStore(self._store)
        seen_chunks: set[Cid] = set()
        seen_versions: set[Cid] = set()
        frontier: list[tuple[Cid, int]] = [(uid, 0)]
        checked = 0
        while frontier:
            u, hops = frontier.pop()
            if u in seen_versions:
                continue
            seen_versions.add(u)
            chunk = vstore.get_chunk(u)
            if chunk.type is not ChunkType.META:
                raise TamperDetected(u, self._store.compute_cid(chunk))
            v = Version.decode(chunk.payload)
            kind = ValueKind(v.kind)
            if kind.is_chunkable:
                self._verify_tree(vstore, v.data, seen_chunks)
            checked += 1
            if max_hops is None or hops < max_hops:
                frontier.extend((b, hops + 1) for b in v.bases)
        return checked

    def _verify_tree(self, vstore, root_cid: Cid, seen: set[Cid]) -> None:
        stack = [root_cid]
        while stack:
            cid = stack.pop()
            if cid in seen:
                continue
            seen.add(cid)
            chunk = vstore.get_chunk(cid)
            if chunk.type.is_index:
                stack.extend(e.cid for e in decode_entries(chunk.type, chunk.payload))

    # -- tables -------------------------------------------------------------------
    #
    # One relation, two physical shapes over the same primitives: row keeps
    # whole records under their primary key; column keeps one sequence per
    # column so per-column scans touch nothing else.

    def table_import(self, key, source, layout: str = "row", primary_key: str | None = None,
                     branch: str | None = None) -> Cid:
        """Load CSV (path, file, or text) into a table object; returns its uid."""
        if layout not in ("row", "column"):
            raise ValueError(f"layout must be 'row' or 'column', not {layout!r}")
        header, rows = _read_csv(source)
        pk = primary_key if primary_key is not None else header[0]
        if pk not in header:
            raise SchemaError(f"primary key column {pk!r} not in header {header}")
        pk_idx = header.index(pk)
        rows.sort(key=lambda r: r[pk_idx].encode("utf-8"))
        for a, b in zip(rows, rows[1:]):
            if a[pk_idx] == b[pk_idx]:
                raise SchemaError(f"duplicate primary key {a[pk_idx]!r}")
        if layout == "row":
            value = {
                row[pk_idx].encode("utf-8"): encode_tuple(row) for row in rows
            }
        else:
            value = {}
            for i, col in enumerate(header):
                tree = _build_column(self._store, [r[i] for r in rows], self.config.chunker)
                value[col.encode("utf-8")] = tree.root_cid
        context = json.dumps(
            {"table": {"layout": layout, "columns": header, "key": pk}},
            sort_keys=True,
        ).encode("utf-8")
        return self.put(key, value, branch=branch, context=context)

    def table_export(self, key=None, branch: str | None = None, uid: Cid | None = None,
                     out=None) -> str | None:
        """Reconstruct a table version as CSV (string, or written to `out`)."""
        obj = self.get(key, branch, uid) if key is not None else self.get_by_uid(uid)
        schema = _table_schema(obj)
        header = schema["columns"]
        pk_idx = header.index(schema["key"])
        tree = obj.tree()
        if schema["layout"] == "row":
            rows = [
                [f.decode("utf-8") for f in decode_tuple(enc)] for _, enc in tree.iterate()
            ]
        else:
            columns = []
            for col in header:
                _, cid = tree.lookup(col.encode("utf-8"))
                columns.append(
                    [f.decode("utf-8") for f in _column_tree(self._store, cid, self.config.chunker).iterate()]
                )
            rows = [list(r) for r in zip(*columns)] if columns and columns[0] else []
        rows.sort(key=lambda r: r[pk_idx].encode("utf-8"))
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        text = buf.getvalue()
        if out is None:
            return text
        if hasattr(out, "write"):
            out.write(text)
            return None
        with open(out, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        return None

    def table_aggregate(self, key=None, column: str = "", branch: str | None = None,
                        uid: Cid | None = None, fn: Callable = sum) -> float:
        """Numeric fold over one column; column layout reads only that column."""
        obj = self.get(key, branch, uid) if key is not None else self.get_by_uid(uid)
        schema = _table_schema(obj)
        if column not in schema["columns"]:
            raise SchemaError(f"no column {column!r} in table {schema['columns']}")
        tree = obj.tree()
        if schema["layout"] == "column":
            _, cid = tree.lookup(column.encode("utf-8"))
            values = _column_tree(self._store, cid, self.config.chunker).iterate()
            return fn(float(v) for v in values)
        idx = schema["columns"].index(column)
        return fn(float(decode_tuple(enc)[idx]) for _, enc in tree.iterate())

    def get_by_uid(self, uid: Cid) -> FObject:
        v = load_version(self._store, uid)
        return self._wrap(uid, v)

    # -- lifecycle ----------------------------------------------------------------

    def sync(self) -> None:
        self._store.sync()
        self._branches.sync()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self._branches.close()
        self._store.close()

    def __enter__(self) -> "Engine":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def __repr__(self) -> str:
        where = self.path or "<injected>"
        return f"Engine({where})"


def _build_column(store, fields: list[str], config: ChunkerConfig) -> PosTree:
    from .postree import build

    return build(store, ChunkType.LIST, [f.encode("utf-8") for f in fields], config)


def _column_tree(store, cid: Cid, config: ChunkerConfig) -> PosTree:
    if len(cid) != CID_SIZE:
        raise SchemaError("column entry does not hold a sequence reference")
    return PosTree(store, ChunkType.LIST, cid, config)


def _table_schema(obj: FObject) -> dict:
    if obj.kind is not ValueKind.MAP:
        raise SchemaError(f"version holds {obj.kind.name}, not a table map")
    try:
        meta = json.loads(obj.context.decode("utf-8"))
        table = meta["table"]
        layout, columns, pk = table["layout"], table["columns"], table["key"]
    except (ValueError, KeyError, UnicodeDecodeError):
        raise SchemaError("version does not carry table layout metadata") from None
    if layout not in ("row", "column") or pk not in columns:
        raise SchemaError("corrupt table layout metadata")
    return {"layout": layout, "columns": columns, "key": pk}


def _read_csv(source) -> tuple[list[str], list[list[str]]]:
    if hasattr(source, "read"):
        fh = source
        close = False
    elif isinstance(source, str) and "\n" in source:
        fh = io.StringIO(source)
        close = False
    else:
        fh = open(source, "r", encoding="utf-8", newline="")
        close = True
    try:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("CSV source is empty: a header row is required") from None
        if not header or any(not c for c in header):
            raise SchemaError(f"bad header row: {header}")
        if len(set(header)) != len(header):
            raise SchemaError(f"duplicate column names in header: {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(
                    f"row {lineno} has {len(row)} fields, header has {len(header)}"
                )
            rows.append(row)
        return header, rows
    finally:
        if close:
            fh.close()
