"""Command-line surface: every subcommand against the library facade."""

import io
import json
import socket
import sys
import threading
import time
import types

import pytest

from forkstore import cli
from forkstore.engine import Engine

CSV_TEXT = "id,name,qty\n003,gadget,7\n001,widget,2\n002,sprocket,5\n"


def run_cli(argv, capsys):
    code = cli.main(argv)
    captured = capsys.readouterr()
    return code, captured.out, captured.err


@pytest.fixture
def store(tmp_path):
    return str(tmp_path / "db")


def test_put_reads_value_from_stdin(store, capsys, monkeypatch):
    payload = b"piped bytes " * 30
    monkeypatch.setattr(sys, "stdin", types.SimpleNamespace(buffer=io.BytesIO(payload)))
    code, out, _ = run_cli(["--store", store, "put", "doc"], capsys)
    assert code == 0
    uid = bytes.fromhex(out.strip())
    with Engine(store) as engine:
        obj = engine.get("doc")
        assert obj.uid == uid
        assert obj.value() == payload


def test_put_get_roundtrip_through_files(store, tmp_path, capsys):
    src = tmp_path / "in.bin"
    dst = tmp_path / "out.bin"
    src.write_bytes(bytes(range(256)) * 64)
    code, out, _ = run_cli(["--store", store, "put", "doc", "--value-file", str(src)], capsys)
    assert code == 0
    code, _, _ = run_cli(["--store", store, "get", "doc", "--out", str(dst)], capsys)
    assert code == 0
    assert dst.read_bytes() == src.read_bytes()


def test_typed_values_roundtrip(store, tmp_path, capsys):
    text_file = tmp_path / "v.txt"
    text_file.write_text("typed text value")
    code, _, _ = run_cli(
        ["--store", store, "put", "note", "--kind", "string",
         "--value-file", str(text_file)], capsys)
    assert code == 0
    code, out, _ = run_cli(["--store", store, "get", "note"], capsys)
    assert (code, out) == (0, "typed text value")

    num_file = tmp_path / "n.txt"
    num_file.write_text("-12345\n")
    run_cli(["--store", store, "put", "counter", "--kind", "int",
             "--value-file", str(num_file)], capsys)
    code, out, _ = run_cli(["--store", store, "get", "counter"], capsys)
    assert (code, out) == (0, "-12345")
    with Engine(store) as engine:
        assert engine.get("note").value() == "typed text value"
        assert engine.get("counter").value() == -12345


def test_meta_output_matches_the_facade(store, tmp_path, capsys):
    vf = tmp_path / "v.bin"
    vf.write_bytes(b"first")
    run_cli(["--store", store, "put", "doc", "--value-file", str(vf),
             "--context", "initial load"], capsys)
    vf.write_bytes(b"second")
    run_cli(["--store", store, "put", "doc", "--value-file", str(vf)], capsys)
    code, out, _ = run_cli(["--store", store, "get", "doc", "--meta"], capsys)
    assert code == 0
    meta = json.loads(out)
    with Engine(store) as engine:
        obj = engine.get("doc")
        assert meta["uid"] == obj.uid.hex()
        assert meta["depth"] == obj.depth == 1
        assert meta["bases"] == [b.hex() for b in obj.bases]
        parent = engine.get("doc", uid=obj.bases[0])
        assert parent.context == b"initial load"


def test_structured_values_render_as_json(store, capsys):
    with Engine(store) as engine:
        engine.put("table", {b"name": b"widget", b"qty": b"7"})
    code, out, _ = run_cli(["--store", store, "get", "table"], capsys)
    assert code == 0
    assert json.loads(out) == {"name": "widget", "qty": "7"}


def test_fork_edit_merge_matches_the_facade(store, tmp_path, capsys):
    vf = tmp_path / "v.bin"
    vf.write_bytes(b"base " * 400)
    run_cli(["--store", store, "put", "doc", "--value-file", str(vf)], capsys)
    code, out, _ = run_cli(["--store", store, "fork", "doc", "dev"], capsys)
    assert code == 0
    vf.write_bytes(b"base " * 400 + b"extended on dev")
    run_cli(["--store", store, "put", "doc", "--branch", "dev",
             "--value-file", str(vf)], capsys)
    code, out, _ = run_cli(["--store", store, "merge", "doc", "master",
                            "--branch", "dev"], capsys)
    assert code == 0
    merged = out.strip()
    with Engine(store) as engine:
        assert engine.get("doc").uid.hex() == merged
        assert engine.get("doc").value().endswith(b"extended on dev")


def test_branch_listing_rename_and_remove(store, tmp_path, capsys):
    vf = tmp_path / "v"
    vf.write_bytes(b"content")
    run_cli(["--store", store, "put", "doc", "--value-file", str(vf)], capsys)
    run_cli(["--store", store, "fork", "doc", "dev"], capsys)
    code, out, _ = run_cli(["--store", store, "branch", "doc"], capsys)
    assert code == 0
    with Engine(store) as engine:
        expected = sorted(engine.list_branches("doc").items())
    assert out.splitlines() == [f"{n} {u.hex()}" for n, u in expected]

    assert run_cli(["--store", store, "branch", "doc", "--rename", "dev", "trial"],
                   capsys)[0] == 0
    assert run_cli(["--store", store, "branch", "doc", "--remove", "trial"],
                   capsys)[0] == 0
    code, out, _ = run_cli(["--store", store, "branch", "doc"], capsys)
    assert [line.split()[0] for line in out.splitlines()] == ["master"]


def test_track_lists_history_nearest_first(store, tmp_path, capsys):
    vf = tmp_path / "v"
    uids = []
    for i in range(4):
        vf.write_bytes(b"content %d " % i * 50)
        _, out, _ = run_cli(["--store", store, "put", "doc", "--value-file", str(vf),
                             "--context", f"edit {i}"], capsys)
        uids.append(out.strip())
    code, out, _ = run_cli(["--store", store, "track", "doc"], capsys)
    assert code == 0
    lines = out.splitlines()
    assert len(lines) == 4
    assert [line.split()[1] for line in lines] == uids[::-1]
    assert lines[0].startswith("0 ") and "depth=3" in lines[0]
    assert "context=edit 3" in lines[0]

    code, out, _ = run_cli(["--store", store, "track", "doc", "--max-hops", "1"], capsys)
    assert len(out.splitlines()) == 2


def test_diff_renders_map_and_blob_changes(store, capsys):
    with Engine(store) as engine:
        u1 = engine.put("m", {b"a": b"1", b"b": b"2"})
        u2 = engine.put("m", {b"a": b"1", b"b": b"3", b"c": b"4"})
        b1 = engine.put("blob", b"A" * 5000)
        b2 = engine.put("blob", b"A" * 2000 + b"B" * 100 + b"A" * 3000)
    code, out, _ = run_cli(["--store", store, "diff", "m", u1.hex(), u2.hex()], capsys)
    assert code == 0
    assert json.loads(out) == {
        "added": {"c": "4"},
        "removed": {},
        "changed": {"b": ["2", "3"]},
    }
    code, out, _ = run_cli(["--store", store, "diff", "blob", b1.hex(), b2.hex()], capsys)
    assert code == 0
    splices = json.loads(out)["splices"]
    assert splices and all(s["stop"] >= s["start"] for s in splices)


def test_lca_prints_the_fork_point(store, tmp_path, capsys):
    vf = tmp_path / "v"
    vf.write_bytes(b"shared base " * 100)
    _, out, _ = run_cli(["--store", store, "put", "doc", "--value-file", str(vf)], capsys)
    fork_point = out.strip()
    run_cli(["--store", store, "fork", "doc", "dev"], capsys)
    vf.write_bytes(b"master edit " * 100)
    _, out, _ = run_cli(["--store", store, "put", "doc", "--value-file", str(vf)], capsys)
    master_uid = out.strip()
    vf.write_bytes(b"dev edit " * 100)
    _, out, _ = run_cli(["--store", store, "put", "doc", "--branch", "dev",
                         "--value-file", str(vf)], capsys)
    dev_uid = out.strip()
    code, out, _ = run_cli(["--store", store, "lca", "doc", master_uid, dev_uid], capsys)
    assert (code, out.strip()) == (0, fork_point)


def test_table_import_export_roundtrip(store, tmp_path, capsys):
    csv_in = tmp_path / "t.csv"
    csv_in.write_text(CSV_TEXT)
    code, out, _ = run_cli(["--store", store, "import", "inventory", str(csv_in),
                            "--layout", "column"], capsys)
    assert code == 0
    uid = out.strip()
    code, out, _ = run_cli(["--store", store, "export", "inventory"], capsys)
    assert code == 0
    with Engine(store) as engine:
        assert engine.get("inventory").uid.hex() == uid
        assert out == engine.table_export("inventory")
    assert out.splitlines()[0] == "id,name,qty"
    assert [line.split(",")[0] for line in out.splitlines()[1:]] == ["001", "002", "003"]

    out_file = tmp_path / "exported.csv"
    code, _, _ = run_cli(["--store", store, "export", "inventory",
                          "--uid", uid, "--out", str(out_file)], capsys)
    assert code == 0
    assert out_file.read_text() == out


def test_error_exit_codes_and_json_stderr(store, tmp_path, capsys):
    vf = tmp_path / "v"
    vf.write_bytes(b"content")

    code, _, err = run_cli(["--store", store, "get", "missing"], capsys)
    assert code == 3
    assert json.loads(err)["error"] == "KeyNotFound"

    _, out, _ = run_cli(["--store", store, "put", "doc", "--value-file", str(vf)], capsys)
    stale = out.strip()
    run_cli(["--store", store, "put", "doc", "--value-file", str(vf)], capsys)
    vf.write_bytes(b"guarded write")
    code, _, err = run_cli(["--store", store, "put", "doc", "--value-file", str(vf),
                            "--guard", stale], capsys)
    assert code == 5
    assert json.loads(err)["error"] == "GuardMismatch"

    code, _, err = run_cli(["--store", store, "fork", "doc", "master"], capsys)
    assert code == 4
    assert json.loads(err)["error"] == "BranchExists"

    code, _, err = run_cli(["--store", store, "get", "doc", "--uid", "zz"], capsys)
    assert code == 2
    assert json.loads(err)["error"] == "ValueError"

    code, _, err = run_cli(["--store", store, "merge", "doc", "master"], capsys)
    assert code == 2  # needs a branch or a uid to merge from
    assert json.loads(err)["error"] == "TypeError"


def test_conflicting_merge_exit_code(store, tmp_path, capsys):
    vf = tmp_path / "v"
    vf.write_bytes(b"base " * 300)
    run_cli(["--store", store, "put", "doc", "--value-file", str(vf)], capsys)
    run_cli(["--store", store, "fork", "doc", "dev"], capsys)
    vf.write_bytes(b"ours " * 300)
    run_cli(["--store", store, "put", "doc", "--value-file", str(vf)], capsys)
    vf.write_bytes(b"theirs " * 300)
    run_cli(["--store", store, "put", "doc", "--branch", "dev",
             "--value-file", str(vf)], capsys)
    code, _, err = run_cli(["--store", store, "merge", "doc", "master",
                            "--branch", "dev"], capsys)
    assert code == 8
    assert json.loads(err)["error"] == "UnresolvedConflicts"
    code, out, _ = run_cli(["--store", store, "merge", "doc", "master",
                            "--branch", "dev", "--resolver", "theirs"], capsys)
    assert code == 0
    with Engine(store) as engine:
        merged = engine.get("doc")
        assert merged.uid.hex() == out.strip()
        assert len(merged.bases) == 2  # a real two-parent merge landed
        assert b"theirs" in merged.value()


def test_store_path_comes_from_the_environment(tmp_path, capsys, monkeypatch):
    vf = tmp_path / "v"
    vf.write_bytes(b"env store")
    monkeypatch.setenv("FORKSTORE_PATH", str(tmp_path / "envdb"))
    code, _, _ = run_cli(["put", "doc", "--value-file", str(vf)], capsys)
    assert code == 0
    code, out, _ = run_cli(["get", "doc"], capsys)
    assert (code, out) == (0, "env store")


def test_missing_target_is_a_usage_error(capsys, monkeypatch):
    monkeypatch.delenv("FORKSTORE_PATH", raising=False)
    monkeypatch.delenv("FORKSTORE_CLUSTER", raising=False)
    code, _, err = run_cli(["get", "doc"], capsys)
    assert code == 2
    assert json.loads(err)["error"] == "ValueError"


def test_chunker_flags_shape_a_new_store(store, tmp_path, capsys):
    vf = tmp_path / "v"
    vf.write_bytes(b"tuned " * 500)
    code, _, _ = run_cli(
        ["--store", store, "--window", "16", "--leaf-bytes", "1024",
         "--digest", "blake2b", "--default-branch", "trunk",
         "put", "doc", "--value-file", str(vf)], capsys)
    assert code == 0
    with Engine(store) as engine:
        assert engine.config.chunker.window_size == 16
        assert engine.config.chunker.target_leaf_bytes == 1024
        assert engine.config.digest_algo == "blake2b"
        assert list(engine.list_branches("doc")) == ["trunk"]


def test_bench_csv_and_json_agree(capsys, tmp_path):
    code, csv_out, _ = run_cli(
        ["bench", "micro-ops", "--seed", "9", "--workdir", str(tmp_path / "a")], capsys)
    assert code == 0
    lines = csv_out.strip().splitlines()
    assert lines[0] == "metric,value"
    code, json_out, _ = run_cli(
        ["bench", "micro-ops", "--seed", "9", "--json",
         "--workdir", str(tmp_path / "b")], capsys)
    assert code == 0
    metrics = json.loads(json_out)
    csv_rows = dict(line.split(",", 1) for line in lines[1:])
    assert set(metrics) == set(csv_rows)
    for name, value in csv_rows.items():
        if not name.endswith("_seconds"):
            assert str(metrics[name]) == value


def _wait_for_port(port, seconds=10):
    deadline = time.monotonic() + seconds
    while time.monotonic() < deadline:
        try:
            socket.create_connection(("127.0.0.1", port), timeout=0.2).close()
            return
        except OSError:
            time.sleep(0.05)
    pytest.fail(f"port {port} never came up")


def test_serve_and_cluster_flags_work_end_to_end(tmp_path, capsys, monkeypatch):
    ports = []
    for _ in range(2):
        probe = socket.create_server(("127.0.0.1", 0))
        ports.append(probe.getsockname()[1])
        probe.close()
    cfg = tmp_path / "cluster.json"
    cfg.write_text(json.dumps({"nodes": [f"127.0.0.1:{p}" for p in ports]}))

    cli._SERVE_STOP.clear()
    threads = [
        threading.Thread(
            target=cli.main,
            args=(["--cluster", str(cfg), "serve", str(i),
                   "--data", str(tmp_path / "nodes")],),
            daemon=True,
        )
        for i in range(2)
    ]
    try:
        for t in threads:
            t.start()
        for p in ports:
            _wait_for_port(p)
        capsys.readouterr()  # drop the listening banners

        vf = tmp_path / "v.bin"
        vf.write_bytes(b"over the wire " * 200)
        code, out, _ = run_cli(["--cluster", str(cfg), "put", "doc",
                                "--value-file", str(vf)], capsys)
        assert code == 0
        uid = out.strip()
        dst = tmp_path / "back.bin"
        code, _, _ = run_cli(["--cluster", str(cfg), "get", "doc",
                              "--out", str(dst)], capsys)
        assert code == 0
        assert dst.read_bytes() == vf.read_bytes()

        monkeypatch.setenv("FORKSTORE_CLUSTER", str(cfg))
        code, out, _ = run_cli(["get", "doc", "--meta"], capsys)
        assert code == 0
        assert json.loads(out)["uid"] == uid
        monkeypatch.delenv("FORKSTORE_CLUSTER")

        code, _, err = run_cli(["--cluster", str(cfg), "import", "t", str(vf)], capsys)
        assert code == 2  # tables need a store directory
    finally:
        cli._SERVE_STOP.set()
        for t in threads:
            t.join(timeout=10)
        cli._SERVE_STOP.clear()
