"""Command-line access to a store directory or a running cluster.

Every subcommand maps one-to-one onto a facade call, so anything scripted
against the CLI behaves exactly like the library. Values travel as bytes:
puts read them from a file or stdin, gets write blobs raw and render
structured kinds as JSON. Errors leave as JSON on stderr with a stable
exit code per error class, so shell scripts can branch on failures
without parsing prose.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
import threading

from . import errors as _errors
from .bench import SCENARIOS, rows_to_csv, rows_to_json, run_scenario
from .chunking import ChunkerConfig
from .cluster import ClusterClient, ClusterServer, ClusterSpec, CLUSTER_ENV
from .engine import Engine, EngineConfig
from .errors import ForkStoreError
from .merge import Resolver
from .values import ValueKind

STORE_ENV = "FORKSTORE_PATH"

# Stable exit codes, grouped by what went wrong. Scripts rely on these.
_EXIT_CODES = {
    _errors.ChunkNotFound: 3,
    _errors.ObjectNotFound: 3,
    _errors.KeyNotFound: 3,
    _errors.BranchNotFound: 3,
    _errors.ElementNotFound: 3,
    _errors.BranchExists: 4,
    _errors.GuardMismatch: 5,
    _errors.TypeMismatch: 6,
    _errors.KeyMismatch: 6,
    _errors.NoCommonAncestor: 7,
    _errors.UnresolvedConflicts: 8,
    _errors.TamperDetected: 9,
    _errors.FormatError: 10,
    _errors.SchemaError: 11,
    _errors.ValueTooLarge: 12,
    _errors.IntegerOverflow: 12,
    _errors.OutOfRange: 12,
    _errors.RetryableTransportError: 13,
    _errors.StoreClosed: 14,
}
USAGE_EXIT = 2

# Tests flip this to stop a foreground `serve` without signals.
_SERVE_STOP = threading.Event()


def _exit_code(exc: BaseException) -> int:
    for cls in type(exc).__mro__:
        if cls in _EXIT_CODES:
            return _EXIT_CODES[cls]
    return USAGE_EXIT if isinstance(exc, (TypeError, ValueError)) else 1


def _fail(exc: BaseException) -> int:
    sys.stderr.write(
        json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n"
    )
    return _exit_code(exc)


# --- argument plumbing -----------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="forkstore",
        description="versioned, branching, content-addressed storage",
    )
    p.add_argument("--store", help=f"store directory (or ${STORE_ENV})")
    p.add_argument("--cluster", help=f"cluster config file (or ${CLUSTER_ENV})")
    p.add_argument("--window", type=int, help="rolling hash window for a new store")
    p.add_argument("--leaf-bytes", type=int, help="target leaf size for a new store")
    p.add_argument("--index-bytes", type=int, help="target index node size for a new store")
    p.add_argument("--digest", choices=("sha256", "blake2b"), help="digest for a new store")
    p.add_argument("--default-branch", help="default branch name for a new store")

    sub = p.add_subparsers(dest="command", required=True)

    def key_arg(sp):
        sp.add_argument("key", help="object key")

    sp = sub.add_parser("put", help="commit a new version")
    key_arg(sp)
    sp.add_argument("--value-file", help="read the value from this file (default stdin)")
    sp.add_argument("--kind", choices=("blob", "string", "int"), default="blob")
    sp.add_argument("--branch")
    sp.add_argument("--guard", help="expected head uid (hex); fails if the head moved")
    sp.add_argument("--context", default="", help="free-form note stored with the version")

    sp = sub.add_parser("get", help="read a version's value")
    key_arg(sp)
    sp.add_argument("--branch")
    sp.add_argument("--uid", help="read this exact version (hex)")
    sp.add_argument("--out", help="write the value to this file instead of stdout")
    sp.add_argument("--meta", action="store_true", help="print version metadata as JSON")

    sp = sub.add_parser("fork", help="start a branch from an existing version")
    key_arg(sp)
    sp.add_argument("new_branch")
    sp.add_argument("--branch", help="source branch (default: the default branch)")
    sp.add_argument("--uid", help="source version (hex)")

    sp = sub.add_parser("merge", help="merge another head into a branch")
    key_arg(sp)
    sp.add_argument("target_branch")
    sp.add_argument("--branch", help="merge this branch's head")
    sp.add_argument("--uid", help="merge this exact version (hex)")
    sp.add_argument("--resolver", choices=("ours", "theirs", "append", "aggregate"))
    sp.add_argument("--context", default="")

    sp = sub.add_parser("branch", help="list, rename, or remove branches")
    key_arg(sp)
    sp.add_argument("--rename", nargs=2, metavar=("OLD", "NEW"))
    sp.add_argument("--remove", metavar="NAME")

    sp = sub.add_parser("track", help="walk a version's history, nearest first")
    key_arg(sp)
    sp.add_argument("--branch")
    sp.add_argument("--uid")
    sp.add_argument("--max-hops", type=int)

    sp = sub.add_parser("diff", help="compare two versions of a key")
    key_arg(sp)
    sp.add_argument("uid_a")
    sp.add_argument("uid_b")

    sp = sub.add_parser("lca", help="latest common ancestor of two versions")
    key_arg(sp)
    sp.add_argument("uid_a")
    sp.add_argument("uid_b")

    sp = sub.add_parser("import", help="load a CSV file as a table")
    key_arg(sp)
    sp.add_argument("csv_path")
    sp.add_argument("--layout", choices=("row", "column"), default="row")
    sp.add_argument("--pk", help="primary key column (default: first column)")
    sp.add_argument("--branch")

    sp = sub.add_parser("export", help="write a table back out as CSV")
    key_arg(sp)
    sp.add_argument("--branch")
    sp.add_argument("--uid")
    sp.add_argument("--out", help="output file (default stdout)")

    sp = sub.add_parser("bench", help="run a seeded workload scenario")
    sp.add_argument("scenario", choices=sorted(SCENARIOS))
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--json", action="store_true", help="JSON object instead of CSV")
    sp.add_argument("--workdir", help="scratch directory (default: a temp dir)")

    sp = sub.add_parser("serve", help="run one cluster node in the foreground")
    sp.add_argument("node_id", type=int)
    sp.add_argument("--data", required=True, help="node data directory")

    return p


def _open_api(args):
    """Cluster config wins over a store path; one of the two is required."""
    cluster = args.cluster or os.environ.get(CLUSTER_ENV)
    if cluster:
        return ClusterClient(ClusterSpec.load(cluster))
    store = args.store or os.environ.get(STORE_ENV)
    if not store:
        raise ValueError(
            f"no target: pass --store/--cluster or set ${STORE_ENV}/${CLUSTER_ENV}"
        )
    overrides = {
        k: v
        for k, v in (
            ("window_size", args.window),
            ("target_leaf_bytes", args.leaf_bytes),
            ("target_index_bytes", args.index_bytes),
        )
        if v is not None
    }
    config = None
    if overrides or args.digest or args.default_branch:
        config = EngineConfig(
            chunker=ChunkerConfig(**overrides),
            digest_algo=args.digest or "sha256",
            default_branch=args.default_branch or "master",
        )
    return Engine(store, config)


def _uid(text: str | None) -> bytes | None:
    if text is None:
        return None
    try:
        raw = bytes.fromhex(text)
    except ValueError:
        raise ValueError(f"uid {text!r} is not hex") from None
    if len(raw) != 32:
        raise ValueError(f"uid must be 32 bytes, got {len(raw)}")
    return raw


def _read_value(args) -> bytes:
    if args.value_file:
        with open(args.value_file, "rb") as fh:
            return fh.read()
    return sys.stdin.buffer.read()


def _typed_value(raw: bytes, kind: str):
    if kind == "string":
        return raw.decode("utf-8")
    if kind == "int":
        return int(raw.decode("ascii").strip())
    return raw


def _render_bytes(data: bytes) -> str:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError:
        return "hex:" + data.hex()
    if text.isprintable() or text == "":
        return text
    return "hex:" + data.hex()


def _render_value(kind: ValueKind, value) -> bytes:
    """Blobs pass through untouched; everything else prints as text."""
    if kind is ValueKind.BLOB:
        return bytes(value)
    if kind is ValueKind.STRING:
        return value.encode("utf-8")
    if kind is ValueKind.INTEGER:
        return str(value).encode("ascii")
    if kind is ValueKind.MAP:
        out = {_render_bytes(k): _render_bytes(v) for k, v in sorted(value.items())}
        return json.dumps(out, indent=2).encode("utf-8")
    if kind is ValueKind.SET:
        return json.dumps(sorted(_render_bytes(m) for m in value)).encode("utf-8")
    return json.dumps([_render_bytes(x) for x in value]).encode("utf-8")


def _resolver(name: str | None) -> Resolver | None:
    if name is None:
        return None
    return {
        "ours": Resolver.ours,
        "theirs": Resolver.theirs,
        "append": Resolver.append,
        "aggregate": Resolver.aggregate,
    }[name]()


def _emit(data: bytes, out: str | None) -> None:
    if out:
        with open(out, "wb") as fh:
            fh.write(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()


# --- subcommands -------------------------------------------------------------------


def _cmd_put(api, args) -> int:
    uid = api.put(
        args.key,
        _typed_value(_read_value(args), args.kind),
        branch=args.branch,
        guard=_uid(args.guard),
        context=args.context.encode("utf-8"),
    )
    print(uid.hex())
    return 0


def _cmd_get(api, args) -> int:
    obj = api.get(args.key, branch=args.branch, uid=_uid(args.uid))
    if args.meta:
        meta = {
            "uid": obj.uid.hex(),
            "key": _render_bytes(obj.key),
            "kind": obj.kind.name.lower(),
            "depth": obj.depth,
            "bases": [b.hex() for b in obj.bases],
            "context": _render_bytes(obj.context),
        }
        print(json.dumps(meta, indent=2))
        return 0
    _emit(_render_value(obj.kind, obj.value()), args.out)
    return 0


def _cmd_fork(api, args) -> int:
    uid = api.fork(args.key, args.new_branch, ref_branch=args.branch,
                   ref_uid=_uid(args.uid))
    print(uid.hex())
    return 0


def _cmd_merge(api, args) -> int:
    uid = api.merge(
        args.key,
        args.target_branch,
        ref_branch=args.branch,
        ref_uid=_uid(args.uid),
        resolver=_resolver(args.resolver),
        context=args.context.encode("utf-8"),
    )
    print(uid.hex())
    return 0


def _cmd_branch(api, args) -> int:
    if args.rename and args.remove:
        raise ValueError("pass --rename or --remove, not both")
    if args.rename:
        api.rename_branch(args.key, args.rename[0], args.rename[1])
        return 0
    if args.remove:
        api.remove_branch(args.key, args.remove)
        return 0
    for name, uid in sorted(api.list_branches(args.key).items()):
        print(f"{name} {uid.hex()}")
    for uid in api.list_untagged(args.key):
        print(f"(untagged) {uid.hex()}")
    return 0


def _cmd_track(api, args) -> int:
    distance = (0, args.max_hops)
    history = api.track(args.key, branch=args.branch, uid=_uid(args.uid),
                        distance=distance)
    for hop, obj in enumerate(history):
        line = f"{hop} {obj.uid.hex()} depth={obj.depth}"
        if obj.context:
            line += f" context={_render_bytes(obj.context)}"
        print(line)
    return 0


def _cmd_diff(api, args) -> int:
    uid_a, uid_b = _uid(args.uid_a), _uid(args.uid_b)
    if isinstance(api, ClusterClient):
        delta = api.diff_versions(args.key, uid_a, uid_b)
    else:
        delta = api.diff_versions(uid_a, uid_b)
    kind = api.get(args.key, uid=uid_a).kind
    print(json.dumps(_describe_diff(kind, delta), indent=2))
    return 0


def _describe_diff(kind: ValueKind, delta) -> dict:
    if kind is ValueKind.MAP:
        return {
            "added": {_render_bytes(k): _render_bytes(v) for k, v in delta.added.items()},
            "removed": {_render_bytes(k): _render_bytes(v) for k, v in delta.removed.items()},
            "changed": {
                _render_bytes(k): [_render_bytes(a), _render_bytes(b)]
                for k, (a, b) in delta.changed.items()
            },
        }
    if kind is ValueKind.SET:
        return {
            "added": sorted(_render_bytes(m) for m in delta.added),
            "removed": sorted(_render_bytes(m) for m in delta.removed),
        }
    if kind in (ValueKind.BLOB, ValueKind.LIST):
        return {
            "splices": [
                {"start": op.start, "stop": op.stop, "items": len(op.items)}
                for op in delta
            ]
        }
    return {"old": str(delta.old), "new": str(delta.new)}


def _cmd_lca(api, args) -> int:
    uid = api.lca(args.key, _uid(args.uid_a), _uid(args.uid_b))
    print(uid.hex() if uid else "none")
    return 0


def _cmd_import(api, args) -> int:
    if isinstance(api, ClusterClient):
        raise ValueError("table import needs a store directory, not a cluster")
    uid = api.table_import(args.key, args.csv_path, layout=args.layout,
                           primary_key=args.pk, branch=args.branch)
    print(uid.hex())
    return 0


def _cmd_export(api, args) -> int:
    if isinstance(api, ClusterClient):
        raise ValueError("table export needs a store directory, not a cluster")
    text = api.table_export(args.key, branch=args.branch, uid=_uid(args.uid),
                            out=args.out)
    if text is not None:
        sys.stdout.write(text)
    return 0


def _cmd_bench(args) -> int:
    rows = None
    if args.workdir:
        rows = run_scenario(args.scenario, args.workdir, seed=args.seed)
    else:
        with tempfile.TemporaryDirectory(prefix="forkstore-bench-") as td:
            rows = run_scenario(args.scenario, td, seed=args.seed)
    sys.stdout.write(rows_to_json(rows) if args.json else rows_to_csv(rows))
    return 0


def _cmd_serve(args) -> int:
    spec = ClusterSpec.load(args.cluster or os.environ.get(CLUSTER_ENV))
    config = None
    if args.window or args.leaf_bytes or args.index_bytes or args.digest or args.default_branch:
        overrides = {
            k: v
            for k, v in (
                ("window_size", args.window),
                ("target_leaf_bytes", args.leaf_bytes),
                ("target_index_bytes", args.index_bytes),
            )
            if v is not None
        }
        config = EngineConfig(
            chunker=ChunkerConfig(**overrides),
            digest_algo=args.digest or "sha256",
            default_branch=args.default_branch or "master",
        )
    server = ClusterServer(args.node_id, spec, args.data, config)
    server.start()
    host, port = server.addr
    print(f"node {args.node_id} listening on {host}:{port}", flush=True)
    try:
        while not _SERVE_STOP.wait(0.2):
            pass
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


_COMMANDS = {
    "put": _cmd_put,
    "get": _cmd_get,
    "fork": _cmd_fork,
    "merge": _cmd_merge,
    "branch": _cmd_branch,
    "track": _cmd_track,
    "diff": _cmd_diff,
    "lca": _cmd_lca,
    "import": _cmd_import,
    "export": _cmd_export,
}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "bench":
            return _cmd_bench(args)
        if args.command == "serve":
            return _cmd_serve(args)
        api = _open_api(args)
        try:
            return _COMMANDS[args.command](api, args)
        finally:
            api.close()
    except ForkStoreError as exc:
        return _fail(exc)
    except (TypeError, ValueError) as exc:
        return _fail(exc)
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    sys.exit(main())
