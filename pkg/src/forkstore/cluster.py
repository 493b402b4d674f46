"""Multi-node operation: key-routed servlets over cid-routed chunk stores.

Two hash layers spread the data. A request for a key executes on exactly
one servlet, picked by the key's digest, so per-key ordering and branch
state stay single-owner. Chunks a servlet writes are placed by the cid's
digest across all stores, except version records, which stay on the
owning servlet's local store so history walks never leave the node.

The same machinery runs in two shapes. LocalCluster wires N servlets and
N stores inside one process and exposes the engine's call surface, which
makes differential tests against embedded mode cheap. ClusterServer and
ClusterClient speak a length-prefixed binary protocol over TCP; the
client executes key operations on the owning servlet but pulls value
chunks straight from the stores that hold them, bypassing the servlet.

Placement never affects results: uids are content digests, so any node
count (including one, the embedded case) yields identical versions for
the same calls.
"""

from __future__ import annotations

import json
import os
import socket
import struct
import threading
from collections import OrderedDict
from dataclasses import dataclass
from enum import IntEnum
from typing import Sequence

from . import errors as _errors
from .branches import BranchManager
from .chunks import Chunk, ChunkType, Cid, CID_SIZE, digest_bytes, parse_chunk, serialize_chunk
from .engine import Engine, EngineConfig, FObject, as_key, _read_manifest, _write_manifest
from .errors import (
    ChunkNotFound,
    ForkStoreError,
    FormatError,
    RetryableTransportError,
    StoreClosed,
)
from .merge import Resolver
from .postree import PosTree, diff as tree_diff
from .store import ChunkStore, StoreCounters
from .values import ValueKind, decode_primitive, decode_tuple, encode_primitive, encode_tuple
from .versions import Version

CLUSTER_ENV = "FORKSTORE_CLUSTER"
CLUSTER_MANIFEST = "cluster.json"
DEFAULT_CACHE_BYTES = 16 * 1024 * 1024


# --- partition functions -------------------------------------------------------


def _low64(digest: bytes) -> int:
    return int.from_bytes(digest[-8:], "big")


def route_key(key: bytes, n: int, digest_algo: str = "sha256") -> int:
    """Owning servlet for a key: low 64 bits of its digest, mod the count."""
    if n < 1:
        raise ValueError("routing table is empty")
    return _low64(digest_bytes(bytes(key), digest_algo)) % n


def route_chunk(cid: Cid, n: int) -> int:
    """Owning store for a chunk: the cid is already a digest."""
    if n < 1:
        raise ValueError("routing table is empty")
    return _low64(cid) % n


def store_payload_bytes(store, include_meta: bool = False) -> int:
    """Total payload bytes held by a store, version records excluded by default."""
    total = 0
    for cid in store.cids():
        chunk = store.get_chunk(cid)
        if include_meta or chunk.type is not ChunkType.META:
            total += len(chunk.payload)
    return total


# --- chunk cache ----------------------------------------------------------------


class ChunkCache:
    """LRU over remote chunk reads, bounded by payload bytes. Only an
    optimization: content addressing makes stale entries impossible."""

    def __init__(self, max_bytes: int):
        self.max_bytes = max_bytes
        self._entries: OrderedDict[Cid, Chunk] = OrderedDict()
        self._bytes = 0
        self._lock = threading.Lock()

    def get(self, cid: Cid) -> Chunk | None:
        with self._lock:
            chunk = self._entries.get(cid)
            if chunk is not None:
                self._entries.move_to_end(cid)
            return chunk

    def put(self, cid: Cid, chunk: Chunk) -> None:
        size = len(chunk.payload)
        if size > self.max_bytes:
            return
        with self._lock:
            if cid in self._entries:
                return
            self._entries[cid] = chunk
            self._bytes += size
            while self._bytes > self.max_bytes:
                _, evicted = self._entries.popitem(last=False)
                self._bytes -= len(evicted.payload)

    def __len__(self) -> int:
        return len(self._entries)


# --- servlet-side chunk placement -------------------------------------------------


class RoutingStore:
    """Store adapter a servlet writes through.

    Version records go to the servlet's own store; everything else to the
    store owning the cid. Reads try the cache, then the local store, then
    the cid owner. The adapter never owns the underlying stores, so close
    is a no-op and the node tears its store down itself.
    """

    def __init__(
        self,
        local_id: int,
        stores: Sequence,
        digest_algo: str = "sha256",
        spread: bool = True,
        cache_bytes: int = DEFAULT_CACHE_BYTES,
    ):
        self.local_id = local_id
        self.stores = list(stores)
        self._algo = digest_algo
        self.spread = spread  # False pins every chunk to its creator (one-layer mode)
        self.cache = ChunkCache(cache_bytes)
        self.counters = StoreCounters()

    @property
    def digest_algo(self) -> str:
        return self._algo

    @property
    def _local(self):
        return self.stores[self.local_id]

    def _owner(self, cid: Cid) -> int:
        return route_chunk(cid, len(self.stores))

    def put_chunk(self, chunk: Chunk) -> Cid:
        self.counters.puts += 1
        if chunk.type is ChunkType.META or not self.spread:
            return self._local.put_chunk(chunk)
        cid = digest_bytes(serialize_chunk(chunk), self._algo)
        return self.stores[self._owner(cid)].put_chunk(chunk)

    def get_chunk(self, cid: Cid, verify: bool = False) -> Chunk:
        self.counters.gets += 1
        if not verify:
            cached = self.cache.get(cid)
            if cached is not None:
                return cached
        local = self._local
        try:
            return local.get_chunk(cid, verify=verify)
        except ChunkNotFound:
            pass
        owner = self._owner(cid)
        if self.stores[owner] is local:
            raise ChunkNotFound(cid)
        chunk = self.stores[owner].get_chunk(cid, verify=verify)
        self.cache.put(cid, chunk)
        return chunk

    def contains(self, cid: Cid) -> bool:
        return self._local.contains(cid) or self.stores[self._owner(cid)].contains(cid)

    def compute_cid(self, chunk: Chunk) -> Cid:
        return digest_bytes(serialize_chunk(chunk), self._algo)

    def stats(self):
        return self._local.stats()

    def sync(self) -> None:
        self._local.sync()

    def close(self) -> None:
        pass


class _UnionStore:
    """Read-only view over every store at once, for cross-key operations
    (diff between uids of different keys) where no single owner applies."""

    def __init__(self, stores: Sequence, digest_algo: str):
        self.stores = list(stores)
        self._algo = digest_algo

    @property
    def digest_algo(self) -> str:
        return self._algo

    def get_chunk(self, cid: Cid, verify: bool = False) -> Chunk:
        for store in self.stores:
            try:
                return store.get_chunk(cid, verify=verify)
            except ChunkNotFound:
                continue
        raise ChunkNotFound(cid)

    def contains(self, cid: Cid) -> bool:
        return any(s.contains(cid) for s in self.stores)

    def put_chunk(self, chunk: Chunk) -> Cid:
        raise TypeError("this view is read-only")


# --- in-process cluster ------------------------------------------------------------


@dataclass
class _Node:
    store: ChunkStore
    branches: BranchManager
    engine: Engine


class LocalCluster:
    """N servlets and N stores in one process, engine-shaped call surface.

    Each key operation runs on the key's owning servlet; results are
    byte-identical to a single embedded engine over the same calls.
    """

    def __init__(
        self,
        base_dir: str | os.PathLike,
        n: int | None = None,
        config: EngineConfig | None = None,
        spread: bool = True,
        cache_bytes: int = DEFAULT_CACHE_BYTES,
    ):
        base = os.fspath(base_dir)
        os.makedirs(base, exist_ok=True)
        manifest = os.path.join(base, CLUSTER_MANIFEST)
        if os.path.exists(manifest):
            with open(manifest, "r", encoding="utf-8") as fh:
                stored = json.load(fh)
            stored_n = stored.get("nodes")
            stored_cfg = EngineConfig.from_dict(stored.get("engine", {}))
            if n is not None and n != stored_n:
                raise FormatError(f"cluster at {base} has {stored_n} nodes, not {n}")
            if config is not None and config != stored_cfg:
                raise FormatError(f"cluster at {base} was created with different settings")
            n, config = stored_n, stored_cfg
        else:
            if n is None or n < 1:
                raise ValueError("a node count is required for a new cluster")
            config = config or EngineConfig()
            tmp = manifest + ".tmp"
            with open(tmp, "w", encoding="utf-8") as fh:
                json.dump({"nodes": n, "engine": config.to_dict()}, fh, indent=2, sort_keys=True)
            os.replace(tmp, manifest)
        self.base = base
        self.config = config
        self.spread = spread
        stores = [
            ChunkStore(os.path.join(base, f"node{i}", "chunks"), config.digest_algo)
            for i in range(n)
        ]
        self.nodes: list[_Node] = []
        for i in range(n):
            routing = RoutingStore(i, stores, config.digest_algo, spread, cache_bytes)
            branches = BranchManager(os.path.join(base, f"node{i}"))
            engine = Engine(config=config, store=routing, branches=branches)
            self.nodes.append(_Node(stores[i], branches, engine))
        self._closed = False

    @property
    def n(self) -> int:
        return len(self.nodes)

    @property
    def stores(self) -> list[ChunkStore]:
        return [node.store for node in self.nodes]

    def servlet_for(self, key) -> int:
        return route_key(as_key(key), self.n, self.config.digest_algo)

    def _engine(self, key) -> Engine:
        return self.nodes[self.servlet_for(key)].engine

    # Key operations run on the owning servlet; signatures mirror Engine.

    def get(self, key, branch=None, uid=None):
        return self._engine(key).get(key, branch, uid)

    def put(self, key, value, branch=None, guard=None, context=b""):
        return self._engine(key).put(key, value, branch, guard, context)

    def put_unconflicted(self, key, value, base=None, context=b""):
        return self._engine(key).put_unconflicted(key, value, base, context)

    def merge(self, key, target_branch, ref_branch=None, ref_uid=None,
              resolver=None, context=b""):
        return self._engine(key).merge(key, target_branch, ref_branch, ref_uid,
                                       resolver, context)

    def merge_versions(self, key, uids, resolver=None, context=b""):
        return self._engine(key).merge_versions(key, uids, resolver, context)

    def fork(self, key, new_branch, ref_branch=None, ref_uid=None):
        return self._engine(key).fork(key, new_branch, ref_branch, ref_uid)

    def rename_branch(self, key, branch, new_name):
        return self._engine(key).rename_branch(key, branch, new_name)

    def remove_branch(self, key, branch):
        return self._engine(key).remove_branch(key, branch)

    def track(self, key, branch=None, uid=None, distance=(0, None)):
        return self._engine(key).track(key, branch, uid, distance)

    def lca(self, key, uid_a, uid_b):
        return self._engine(key).lca(key, uid_a, uid_b)

    def list_branches(self, key):
        return self._engine(key).list_branches(key)

    def list_untagged(self, key):
        return self._engine(key).list_untagged(key)

    def verify(self, key, branch=None, uid=None, max_hops=None):
        return self._engine(key).verify(key, branch, uid, max_hops)

    def list_keys(self) -> list[bytes]:
        merged: set[bytes] = set()
        for node in self.nodes:
            merged.update(node.engine.list_keys())
        return sorted(merged)

    def diff_versions(self, uid_a: Cid, uid_b: Cid):
        view = _UnionStore(self.stores, self.config.digest_algo)
        helper = Engine(config=self.config, store=view, branches=self.nodes[0].branches)
        return helper.diff_versions(uid_a, uid_b)

    def sync(self) -> None:
        for node in self.nodes:
            node.engine.sync()
            node.store.sync()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for node in self.nodes:
            node.engine.close()  # routing adapter ignores close
        for node in self.nodes:
            if not node.store._closed:
                node.store.close()

    def __enter__(self) -> "LocalCluster":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --- wire protocol -----------------------------------------------------------------
#
# Frame: u32 length, u8 opcode, u32 request id, payload. The length covers
# opcode + id + payload. Responses echo the opcode and id; their payload
# starts with one status byte (0 ok, 1 error), errors carry the error
# class name and message as a two-field tuple. Structured payloads reuse
# the length-prefixed tuple encoding that value records use.


class Op(IntEnum):
    GET_HEAD = 1          # (key, branch) -> (uid, version record)
    GET_VERSION = 2       # (key, uid) -> (uid, version record)
    PUT_HEAD = 3          # (key, branch, kind, value, guard|'', context) -> (uid,)
    PUT_BASED = 4         # (key, base|'', kind, value, context) -> (uid,)
    MERGE_HEADS = 5       # (key, target, ref branch, resolver, context) -> (uid,)
    MERGE_VERSION = 6     # (key, target, ref uid, resolver, context) -> (uid,)
    MERGE_MANY = 7        # (key, resolver, context, uid...) -> (uid,)
    LIST_KEYS = 8         # () -> (key...)
    LIST_BRANCHES = 9     # (key,) -> (name, uid)...
    LIST_UNTAGGED = 10    # (key,) -> (uid...)
    FORK_HEAD = 11        # (key, source branch, new branch) -> (uid,)
    FORK_VERSION = 12     # (key, uid, new branch) -> (uid,)
    RENAME_BRANCH = 13    # (key, old, new) -> ()
    REMOVE_BRANCH = 14    # (key, branch) -> ()
    TRACK_HEAD = 15       # (key, branch, lo, hi|'') -> (uid, version record)...
    TRACK_VERSION = 16    # (key, uid, lo, hi|'') -> (uid, version record)...
    FIND_LCA = 17         # (key, uid, uid) -> (uid,) or ()
    GET_CHUNK = 18        # raw cid -> raw chunk record
    PUT_CHUNK = 19        # raw chunk record -> raw cid
    GET_CONFIG = 20       # () -> engine settings as JSON


_HEADER = struct.Struct("<IBI")  # length, opcode, request id
MAX_FRAME = 256 * 1024 * 1024


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        part = sock.recv(n - len(buf))
        if not part:
            raise RetryableTransportError("connection closed mid-frame")
        buf.extend(part)
    return bytes(buf)


def send_frame(sock: socket.socket, opcode: int, request_id: int, payload: bytes) -> None:
    header = _HEADER.pack(5 + len(payload), opcode, request_id)
    sock.sendall(header + payload)


def recv_frame(sock: socket.socket) -> tuple[int, int, bytes]:
    length = struct.unpack("<I", _recv_exact(sock, 4))[0]
    if not 5 <= length <= MAX_FRAME:
        raise FormatError(f"bad frame length {length}")
    body = _recv_exact(sock, length)
    opcode, request_id = struct.unpack("<BI", body[:5])
    return opcode, request_id, body[5:]


def _encode_error(exc: BaseException) -> bytes:
    return b"\x01" + encode_tuple((type(exc).__name__, str(exc)))


def _rebuild_error(cls: type, message: str) -> BaseException:
    # Some error classes take structured arguments; over the wire only the
    # class and text survive, so skip a mismatched __init__ when needed.
    try:
        return cls(message)
    except TypeError:
        exc = cls.__new__(cls)
        Exception.__init__(exc, message)
        return exc


def _decode_reply(payload: bytes) -> bytes:
    if not payload:
        raise FormatError("empty reply")
    if payload[0] == 0:
        return payload[1:]
    name, message = decode_tuple(payload[1:])
    text = message.decode("utf-8")
    cls = getattr(_errors, name.decode("utf-8"), None)
    if isinstance(cls, type) and issubclass(cls, ForkStoreError):
        raise _rebuild_error(cls, text)
    if name == b"TypeError":
        raise TypeError(text)
    if name == b"ValueError":
        raise ValueError(text)
    raise ForkStoreError(f"{name.decode('utf-8')}: {text}")


# Whole values cross the wire in the same canonical encodings the store
# uses; servlets rebuild trees themselves (construction is never offloaded).


def encode_value_literal(value) -> tuple[ValueKind, bytes]:
    from .values import infer_kind, Handle

    if isinstance(value, Handle):
        value = value.value()
    kind = infer_kind(value)
    if kind is ValueKind.BLOB:
        return kind, bytes(value)
    if kind is ValueKind.LIST:
        return kind, encode_tuple(tuple(value))
    if kind is ValueKind.SET:
        return kind, encode_tuple(tuple(sorted(bytes(m) for m in value)))
    if kind is ValueKind.MAP:
        flat: list[bytes] = []
        for k in sorted(value):
            flat.append(k)
            flat.append(value[k])
        return kind, encode_tuple(tuple(flat))
    return kind, encode_primitive(kind, value)


def decode_value_literal(kind: ValueKind, data: bytes):
    if kind is ValueKind.BLOB:
        return data
    if kind is ValueKind.LIST:
        return list(decode_tuple(data))
    if kind is ValueKind.SET:
        return set(decode_tuple(data))
    if kind is ValueKind.MAP:
        flat = decode_tuple(data)
        if len(flat) % 2:
            raise FormatError("map literal with dangling key")
        return {flat[i]: flat[i + 1] for i in range(0, len(flat), 2)}
    return decode_primitive(kind, data)


def _resolver_from_name(name: bytes) -> Resolver | None:
    if not name:
        return None
    label = name.decode("utf-8")
    factory = {"ours": Resolver.ours, "theirs": Resolver.theirs,
               "append": Resolver.append, "aggregate": Resolver.aggregate}.get(label)
    if factory is None:
        raise ValueError(f"unknown resolver {label!r}")
    return factory()


def _resolver_to_name(resolver: Resolver | None) -> bytes:
    if resolver is None:
        return b""
    if resolver.strategy == "custom":
        raise TypeError("custom resolvers cannot cross the wire; use a named strategy")
    return resolver.strategy.encode("utf-8")


def _encode_versions(pairs) -> bytes:
    flat: list[bytes] = []
    for uid, version in pairs:
        flat.append(uid)
        flat.append(version.encode())
    return encode_tuple(tuple(flat))


# --- cluster configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ClusterSpec:
    """Static membership: one address per node, every node runs both roles."""

    addrs: tuple[tuple[str, int], ...]
    cache_bytes: int = DEFAULT_CACHE_BYTES
    spread: bool = True

    @property
    def n(self) -> int:
        return len(self.addrs)

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterSpec":
        nodes = d.get("nodes")
        if not isinstance(nodes, list) or not nodes:
            raise FormatError("cluster config needs a nonempty 'nodes' list")
        addrs = []
        for entry in nodes:
            if isinstance(entry, dict):
                roles = entry.get("roles", ["servlet", "store"])
                if "servlet" in roles and "store" not in roles:
                    raise FormatError("a servlet node must also host a store")
                entry = entry.get("addr", "")
            host, _, port = str(entry).rpartition(":")
            if not host or not port.isdigit():
                raise FormatError(f"bad node address {entry!r}")
            addrs.append((host, int(port)))
        partition = d.get("partition", "2lp")
        if partition not in ("1lp", "2lp"):
            raise FormatError(f"partition must be '1lp' or '2lp', not {partition!r}")
        return cls(
            addrs=tuple(addrs),
            cache_bytes=int(d.get("cache_bytes", DEFAULT_CACHE_BYTES)),
            spread=partition == "2lp",
        )

    @classmethod
    def load(cls, path: str | os.PathLike | None = None) -> "ClusterSpec":
        if path is None:
            path = os.environ.get(CLUSTER_ENV)
            if not path:
                raise FormatError(f"no cluster config given and {CLUSTER_ENV} is unset")
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# --- networked node -------------------------------------------------------------------


class _PeerStore:
    """Chunk reads and writes against another node, with one reconnect."""

    def __init__(self, addr: tuple[str, int], digest_algo: str):
        self.addr = addr
        self._algo = digest_algo
        self._sock: socket.socket | None = None
        self._lock = threading.Lock()
        self._next_id = 0

    @property
    def digest_algo(self) -> str:
        return self._algo

    def _call(self, opcode: int, payload: bytes) -> bytes:
        with self._lock:
            for attempt in (0, 1):
                if self._sock is None:
                    try:
                        self._sock = socket.create_connection(self.addr, timeout=30)
                    except OSError as exc:
                        raise RetryableTransportError(f"cannot reach {self.addr}: {exc}") from None
                self._next_id += 1
                rid = self._next_id
                try:
                    send_frame(self._sock, opcode, rid, payload)
                    op, got_rid, reply = recv_frame(self._sock)
                except (OSError, RetryableTransportError):
                    self._close_socket()
                    if attempt:
                        raise RetryableTransportError(f"lost connection to {self.addr}")
                    continue
                if got_rid != rid:
                    self._close_socket()
                    raise RetryableTransportError("response id does not match request")
                return _decode_reply(reply)
            raise RetryableTransportError(f"lost connection to {self.addr}")

    def get_chunk(self, cid: Cid, verify: bool = False) -> Chunk:
        record = self._call(Op.GET_CHUNK, bytes(cid))
        if verify:
            actual = digest_bytes(record, self._algo)
            if actual != cid:
                raise _errors.TamperDetected(cid, actual)
        return parse_chunk(record)

    def put_chunk(self, chunk: Chunk) -> Cid:
        return self._call(Op.PUT_CHUNK, serialize_chunk(chunk))

    def contains(self, cid: Cid) -> bool:
        try:
            self.get_chunk(cid)
            return True
        except ChunkNotFound:
            return False

    def close(self) -> None:
        with self._lock:
            self._close_socket()

    def _close_socket(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


class ClusterServer:
    """One node: a servlet plus a chunk store behind one listening socket."""

    def __init__(
        self,
        node_id: int,
        spec: ClusterSpec,
        data_dir: str | os.PathLike,
        config: EngineConfig | None = None,
    ):
        if not 0 <= node_id < spec.n:
            raise ValueError(f"node id {node_id} outside 0..{spec.n - 1}")
        self.node_id = node_id
        self.spec = spec
        base = os.path.join(os.fspath(data_dir), f"node{node_id}")
        os.makedirs(base, exist_ok=True)
        manifest = os.path.join(base, "manifest.json")
        if os.path.exists(manifest):
            stored = _read_manifest(manifest)
            if config is not None and config != stored:
                raise FormatError(f"node {node_id} was created with different settings")
            config = stored
        else:
            config = config or EngineConfig()
            _write_manifest(manifest, config)
        self.config = config
        self.store = ChunkStore(os.path.join(base, "chunks"), config.digest_algo)
        peers = [
            self.store if i == node_id else _PeerStore(addr, config.digest_algo)
            for i, addr in enumerate(spec.addrs)
        ]
        self._peers = peers
        routing = RoutingStore(node_id, peers, config.digest_algo,
                               spec.spread, spec.cache_bytes)
        self.engine = Engine(config=config,
                             store=routing,
                             branches=BranchManager(base))
        self._listener: socket.socket | None = None
        self._threads: list[threading.Thread] = []
        self._conns: set[socket.socket] = set()
        self._conns_lock = threading.Lock()
        self._stopping = threading.Event()

    @property
    def addr(self) -> tuple[str, int]:
        if self._listener is not None:
            return self._listener.getsockname()[:2]
        return self.spec.addrs[self.node_id]

    def start(self) -> "ClusterServer":
        host, port = self.spec.addrs[self.node_id]
        self._listener = socket.create_server((host, port), reuse_port=False)
        self._listener.settimeout(0.2)
        t = threading.Thread(target=self._accept_loop, daemon=True,
                             name=f"node{self.node_id}-accept")
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self) -> None:
        while not self._stopping.is_set():
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            with self._conns_lock:
                self._conns.add(conn)
            t = threading.Thread(target=self._serve_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _serve_conn(self, conn: socket.socket) -> None:
        try:
            with conn:
                while not self._stopping.is_set():
                    try:
                        opcode, rid, payload = recv_frame(conn)
                    except (RetryableTransportError, OSError, FormatError):
                        return
                    try:
                        body = b"\x00" + self._dispatch(opcode, payload)
                    except Exception as exc:  # error classes cross the wire by name
                        body = _encode_error(exc)
                    try:
                        send_frame(conn, opcode, rid, body)
                    except OSError:
                        return
        finally:
            with self._conns_lock:
                self._conns.discard(conn)

    def _dispatch(self, opcode: int, payload: bytes) -> bytes:
        eng = self.engine
        if opcode == Op.GET_CHUNK:
            return serialize_chunk(self.store.get_chunk(payload))
        if opcode == Op.PUT_CHUNK:
            return self.store.put_chunk(parse_chunk(payload))
        if opcode == Op.GET_CONFIG:
            return json.dumps(self.config.to_dict(), sort_keys=True).encode("utf-8")

        if opcode == Op.GET_HEAD:
            key, branch = decode_tuple(payload)
            uid, version = eng.resolve(key, branch.decode("utf-8") or None)
            return _encode_versions([(uid, version)])
        if opcode == Op.GET_VERSION:
            key, uid = decode_tuple(payload)
            uid, version = eng.resolve(key, uid=uid)
            return _encode_versions([(uid, version)])
        if opcode == Op.PUT_HEAD:
            key, branch, kind, value, guard, context = decode_tuple(payload)
            uid = eng.put(key, decode_value_literal(ValueKind(kind[0]), value),
                          branch=branch.decode("utf-8") or None,
                          guard=guard or None, context=context)
            return encode_tuple((uid,))
        if opcode == Op.PUT_BASED:
            key, base, kind, value, context = decode_tuple(payload)
            uid = eng.put_unconflicted(key, decode_value_literal(ValueKind(kind[0]), value),
                                       base=base or None, context=context)
            return encode_tuple((uid,))
        if opcode == Op.MERGE_HEADS:
            key, target, ref, resolver, context = decode_tuple(payload)
            uid = eng.merge(key, target.decode("utf-8"), ref_branch=ref.decode("utf-8"),
                            resolver=_resolver_from_name(resolver), context=context)
            return encode_tuple((uid,))
        if opcode == Op.MERGE_VERSION:
            key, target, ref_uid, resolver, context = decode_tuple(payload)
            uid = eng.merge(key, target.decode("utf-8"), ref_uid=ref_uid,
                            resolver=_resolver_from_name(resolver), context=context)
            return encode_tuple((uid,))
        if opcode == Op.MERGE_MANY:
            fields = decode_tuple(payload)
            key, resolver, context = fields[0], fields[1], fields[2]
            uid = eng.merge_versions(key, list(fields[3:]),
                                     resolver=_resolver_from_name(resolver), context=context)
            return encode_tuple((uid,))
        if opcode == Op.LIST_KEYS:
            return encode_tuple(tuple(eng.list_keys()))
        if opcode == Op.LIST_BRANCHES:
            (key,) = decode_tuple(payload)
            flat: list[bytes] = []
            for name, uid in sorted(eng.list_branches(key).items()):
                flat.extend((name.encode("utf-8"), uid))
            return encode_tuple(tuple(flat))
        if opcode == Op.LIST_UNTAGGED:
            (key,) = decode_tuple(payload)
            return encode_tuple(tuple(eng.list_untagged(key)))
        if opcode == Op.FORK_HEAD:
            key, src, new = decode_tuple(payload)
            uid = eng.fork(key, new.decode("utf-8"), ref_branch=src.decode("utf-8"))
            return encode_tuple((uid,))
        if opcode == Op.FORK_VERSION:
            key, ref_uid, new = decode_tuple(payload)
            uid = eng.fork(key, new.decode("utf-8"), ref_uid=ref_uid)
            return encode_tuple((uid,))
        if opcode == Op.RENAME_BRANCH:
            key, old, new = decode_tuple(payload)
            eng.rename_branch(key, old.decode("utf-8"), new.decode("utf-8"))
            return encode_tuple(())
        if opcode == Op.REMOVE_BRANCH:
            key, branch = decode_tuple(payload)
            eng.remove_branch(key, branch.decode("utf-8"))
            return encode_tuple(())
        if opcode in (Op.TRACK_HEAD, Op.TRACK_VERSION):
            key, ref, lo, hi = decode_tuple(payload)
            distance = (
                decode_primitive(ValueKind.INTEGER, lo),
                decode_primitive(ValueKind.INTEGER, hi) if hi else None,
            )
            if opcode == Op.TRACK_HEAD:
                objs = eng.track(key, branch=ref.decode("utf-8") or None, distance=distance)
            else:
                objs = eng.track(key, uid=ref, distance=distance)
            pairs = [
                (o.uid, Version(o.key, o.kind, o.data,
                                bases=o.bases, context=o.context, depth=o.depth))
                for o in objs
            ]
            return _encode_versions(pairs)
        if opcode == Op.FIND_LCA:
            key, a, b = decode_tuple(payload)
            uid = eng.lca(key, a, b)
            return encode_tuple(() if uid is None else (uid,))
        raise FormatError(f"unknown opcode {opcode}")

    def stop(self) -> None:
        self._stopping.set()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._conns_lock:
            for conn in list(self._conns):
                try:
                    conn.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                conn.close()
            self._conns.clear()
        for t in self._threads:
            t.join(timeout=2)
        for peer in self._peers:
            if isinstance(peer, _PeerStore):
                peer.close()
        self.engine.close()
        if not self.store._closed:
            self.store.close()

    def __enter__(self) -> "ClusterServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


# --- client ---------------------------------------------------------------------------


class _RemoteChunkSource:
    """Client-side chunk reads, routed by cid, with per-key-owner fallback
    for version records (those never leave their servlet's store)."""

    def __init__(self, peers: Sequence[_PeerStore], digest_algo: str, cache_bytes: int):
        self.peers = list(peers)
        self._algo = digest_algo
        self.cache = ChunkCache(cache_bytes)
        self.counters = StoreCounters()
        self.fallbacks: list[int] = []

    @property
    def digest_algo(self) -> str:
        return self._algo

    def get_chunk(self, cid: Cid, verify: bool = False) -> Chunk:
        self.counters.gets += 1
        cached = self.cache.get(cid)
        if cached is not None:
            return cached
        owner = route_chunk(cid, len(self.peers))
        order = [owner] + [i for i in self.fallbacks if i != owner]
        for i in order:
            try:
                chunk = self.peers[i].get_chunk(cid, verify=verify)
            except ChunkNotFound:
                continue
            self.cache.put(cid, chunk)
            return chunk
        raise ChunkNotFound(cid)

    def put_chunk(self, chunk: Chunk) -> Cid:
        cid = digest_bytes(serialize_chunk(chunk), self._algo)
        return self.peers[route_chunk(cid, len(self.peers))].put_chunk(chunk)

    def contains(self, cid: Cid) -> bool:
        try:
            self.get_chunk(cid)
            return True
        except ChunkNotFound:
            return False


class ClusterClient:
    """Engine-shaped access to a running cluster.

    Key operations execute on the owning servlet; chunk reads for values
    go straight to the stores holding them. Whole values travel with puts;
    servlets build the trees.
    """

    def __init__(self, spec: ClusterSpec | str | os.PathLike | None = None):
        if not isinstance(spec, ClusterSpec):
            spec = ClusterSpec.load(spec)
        self.spec = spec
        self._servlets = [_PeerStore(addr, "sha256") for addr in spec.addrs]
        raw = self._servlets[0]._call(Op.GET_CONFIG, b"")
        self.config = EngineConfig.from_dict(json.loads(raw.decode("utf-8")))
        if self.config.digest_algo != "sha256":
            for peer in self._servlets:
                peer._algo = self.config.digest_algo
        self.chunks = _RemoteChunkSource(self._servlets, self.config.digest_algo,
                                         spec.cache_bytes)

    def _servlet(self, key: bytes) -> _PeerStore:
        return self._servlets[route_key(key, self.spec.n, self.config.digest_algo)]

    def servlet_for(self, key) -> int:
        return route_key(as_key(key), self.spec.n, self.config.digest_algo)

    def _call(self, key: bytes, opcode: int, payload: bytes) -> bytes:
        return self._servlet(key)._call(opcode, payload)

    def _object(self, key: bytes, reply: bytes) -> FObject:
        fields = decode_tuple(reply)
        uid, version = fields[0], Version.decode(fields[1])
        src = self.chunks
        owner = self.servlet_for(key)
        if owner not in src.fallbacks:
            src.fallbacks.append(owner)
        return FObject(src, self.config.chunker, uid, version)

    def _objects(self, key: bytes, reply: bytes) -> list[FObject]:
        fields = decode_tuple(reply)
        out = []
        for i in range(0, len(fields), 2):
            out.append(self._object(key, encode_tuple((fields[i], fields[i + 1]))))
        return out

    def _uid_reply(self, reply: bytes) -> Cid:
        (uid,) = decode_tuple(reply)
        return uid

    # -- engine-shaped surface ----------------------------------------------------

    def get(self, key, branch: str | None = None, uid: Cid | None = None) -> FObject:
        key = as_key(key)
        if uid is not None:
            if branch is not None:
                raise TypeError("pass a branch or a uid, not both")
            reply = self._call(key, Op.GET_VERSION, encode_tuple((key, uid)))
        else:
            reply = self._call(key, Op.GET_HEAD,
                               encode_tuple((key, (branch or "").encode("utf-8"))))
        return self._object(key, reply)

    def put(self, key, value, branch: str | None = None, guard: Cid | None = None,
            context: bytes = b"") -> Cid:
        key = as_key(key)
        kind, data = encode_value_literal(value)
        payload = encode_tuple((key, (branch or "").encode("utf-8"),
                                bytes([kind]), data, guard or b"", context))
        return self._uid_reply(self._call(key, Op.PUT_HEAD, payload))

    def put_unconflicted(self, key, value, base: Cid | None = None,
                         context: bytes = b"") -> Cid:
        key = as_key(key)
        kind, data = encode_value_literal(value)
        payload = encode_tuple((key, base or b"", bytes([kind]), data, context))
        return self._uid_reply(self._call(key, Op.PUT_BASED, payload))

    def merge(self, key, target_branch: str, ref_branch: str | None = None,
              ref_uid: Cid | None = None, resolver: Resolver | None = None,
              context: bytes = b"") -> Cid:
        key = as_key(key)
        if (ref_branch is None) == (ref_uid is None):
            raise TypeError("pass exactly one of ref_branch or ref_uid")
        name = _resolver_to_name(resolver)
        if ref_branch is not None:
            payload = encode_tuple((key, target_branch.encode("utf-8"),
                                    ref_branch.encode("utf-8"), name, context))
            return self._uid_reply(self._call(key, Op.MERGE_HEADS, payload))
        payload = encode_tuple((key, target_branch.encode("utf-8"), ref_uid, name, context))
        return self._uid_reply(self._call(key, Op.MERGE_VERSION, payload))

    def merge_versions(self, key, uids: Sequence[Cid], resolver: Resolver | None = None,
                       context: bytes = b"") -> Cid:
        key = as_key(key)
        payload = encode_tuple((key, _resolver_to_name(resolver), context, *uids))
        return self._uid_reply(self._call(key, Op.MERGE_MANY, payload))

    def fork(self, key, new_branch: str, ref_branch: str | None = None,
             ref_uid: Cid | None = None) -> Cid:
        key = as_key(key)
        if ref_branch is not None and ref_uid is not None:
            raise TypeError("fork from a branch or a uid, not both")
        if ref_uid is not None:
            payload = encode_tuple((key, ref_uid, new_branch.encode("utf-8")))
            return self._uid_reply(self._call(key, Op.FORK_VERSION, payload))
        src = ref_branch or self.config.default_branch
        payload = encode_tuple((key, src.encode("utf-8"), new_branch.encode("utf-8")))
        return self._uid_reply(self._call(key, Op.FORK_HEAD, payload))

    def rename_branch(self, key, branch: str, new_name: str) -> None:
        key = as_key(key)
        self._call(key, Op.RENAME_BRANCH,
                   encode_tuple((key, branch.encode("utf-8"), new_name.encode("utf-8"))))

    def remove_branch(self, key, branch: str) -> None:
        key = as_key(key)
        self._call(key, Op.REMOVE_BRANCH, encode_tuple((key, branch.encode("utf-8"))))

    def list_keys(self) -> list[bytes]:
        merged: set[bytes] = set()
        for peer in self._servlets:
            merged.update(decode_tuple(peer._call(Op.LIST_KEYS, encode_tuple(()))))
        return sorted(merged)

    def list_branches(self, key) -> dict[str, Cid]:
        key = as_key(key)
        fields = decode_tuple(self._call(key, Op.LIST_BRANCHES, encode_tuple((key,))))
        return {fields[i].decode("utf-8"): fields[i + 1] for i in range(0, len(fields), 2)}

    def list_untagged(self, key) -> list[Cid]:
        key = as_key(key)
        return list(decode_tuple(self._call(key, Op.LIST_UNTAGGED, encode_tuple((key,)))))

    def track(self, key, branch: str | None = None, uid: Cid | None = None,
              distance: tuple[int, int | None] = (0, None)) -> list[FObject]:
        key = as_key(key)
        lo, hi = distance
        lo_b = encode_primitive(ValueKind.INTEGER, lo)
        hi_b = b"" if hi is None else encode_primitive(ValueKind.INTEGER, hi)
        if uid is not None:
            payload = encode_tuple((key, uid, lo_b, hi_b))
            return self._objects(key, self._call(key, Op.TRACK_VERSION, payload))
        payload = encode_tuple((key, (branch or "").encode("utf-8"), lo_b, hi_b))
        return self._objects(key, self._call(key, Op.TRACK_HEAD, payload))

    def lca(self, key, uid_a: Cid, uid_b: Cid) -> Cid | None:
        key = as_key(key)
        fields = decode_tuple(self._call(key, Op.FIND_LCA, encode_tuple((key, uid_a, uid_b))))
        return fields[0] if fields else None

    def diff_versions(self, key, uid_a: Cid, uid_b: Cid):
        """Compare two versions of one key, fetching chunks directly."""
        va = self.get(key, uid=uid_a)
        vb = self.get(key, uid=uid_b)
        if va.kind != vb.kind:
            raise _errors.TypeMismatch(
                f"cannot diff {va.kind.name} against {vb.kind.name}"
            )
        if va.kind.is_chunkable:
            return tree_diff(va.tree(), vb.tree())
        from .engine import PrimitiveDiff

        return PrimitiveDiff(va.value(), vb.value())

    def close(self) -> None:
        for peer in self._servlets:
            peer.close()

    def __enter__(self) -> "ClusterClient":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
