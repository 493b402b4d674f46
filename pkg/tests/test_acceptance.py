"""Acceptance gate: twelve end-to-end checks with pinned tolerances.

Each test prints one PASS/FAIL line (run with ``pytest -s`` to watch them)
and enforces its own wall-clock budget. Tolerances are fixed here, not
tuned to the implementation: statistical checks use frozen seeds, exact
checks compare full values.
"""

import math
import os
import random
import socket
import time

import numpy as np
import pytest

import conformance
from forkstore.bench import skew_balance
from forkstore.chunking import ChunkerConfig, byte_table, hash_values, split_bytes
from forkstore.chunks import ChunkType
from forkstore.cluster import ClusterClient, ClusterServer, ClusterSpec
from forkstore.engine import Engine, EngineConfig
from forkstore.errors import ForkStoreError
from forkstore.merge import merge_trees
from forkstore.postree import build
from forkstore.store import ChunkStore
from forkstore.values import ValueKind, encode_primitive
from forkstore.versions import commit_version, find_lca


def _report(index: int, label: str, started: float, budget: float, detail: str = ""):
    elapsed = time.perf_counter() - started
    tail = f" [{detail}]" if detail else ""
    if elapsed >= budget:
        print(f"[{index:2d}] FAIL {label}: took {elapsed:.1f}s, budget {budget:.0f}s{tail}")
        raise AssertionError(f"{label}: {elapsed:.1f}s exceeded the {budget:.0f}s budget")
    print(f"[{index:2d}] PASS {label} ({elapsed:.1f}s < {budget:.0f}s){tail}")


# 1 -------------------------------------------------------------------------------


def _direct_hash_array(data: np.ndarray, q: int, k: int) -> np.ndarray:
    """Independent oracle: evaluate every full window from scratch as an
    xor of per-byte table values, each rotated by its distance from the
    window's end."""
    tab = byte_table(q).astype(np.uint64)
    mask = np.uint64((1 << q) - 1)
    n = len(data)
    out = np.zeros(n - k + 1, dtype=np.uint64)
    for j in range(k):
        by = (k - 1 - j) % q
        if by:
            rotated = ((tab << np.uint64(by)) | (tab >> np.uint64(q - by))) & mask
        else:
            rotated = tab
        out ^= rotated[data[j : n - k + 1 + j]]
    return out


def test_01_rolling_hash_matches_direct_evaluation():
    started = time.perf_counter()
    rng = np.random.default_rng(0xACC01)
    q, k = 12, 32
    for _ in range(1000):
        size = int(rng.integers(k, 10 * 1024 + 1))
        data = rng.integers(0, 256, size=size, dtype=np.uint8)
        rolled = np.asarray(hash_values(data.tobytes(), q, k), dtype=np.uint64)
        direct = _direct_hash_array(data, q, k)
        assert np.array_equal(rolled[k - 1 :], direct)
    _report(1, "rolling hash equals direct window evaluation", started, 5.0,
            "1000 inputs, every full-window position")


# 2 -------------------------------------------------------------------------------


def test_02_forced_split_rate_on_random_data():
    started = time.perf_counter()
    rng = np.random.default_rng(0xACC02)
    config = ChunkerConfig()
    assert config.max_size_factor == 8.0
    total = forced = 0
    for _ in range(25):  # 25 slabs of 8MB: 200MB of random bytes
        slab = rng.bytes(8 * 1024 * 1024)
        groups = split_bytes(slab, config)
        for g in groups[:-1]:  # the last group ends at the slab edge
            total += 1
            forced += g.reason == "forced"
    fraction = forced / total
    expected = math.e ** -8  # boundary misses are independent per byte
    assert expected / 3 <= fraction <= expected * 3, (forced, total, fraction)
    _report(2, "forced-split rate within 3x of the no-boundary probability",
            started, 60.0, f"{forced}/{total} = {fraction:.2e}, expected {expected:.2e}")


# 3 -------------------------------------------------------------------------------


def test_03_equal_map_content_means_equal_root(tmp_path):
    started = time.perf_counter()
    rng = random.Random(0xACC03)
    target = {
        f"k{i:05d}".encode(): (f"value-{i * 17}" * (1 + i % 3)).encode()
        for i in range(10_000)
    }
    store = ChunkStore(tmp_path / "store")
    reference = build(store, ChunkType.MAP, target).root_cid
    keys = sorted(target)
    roots = set()
    for _ in range(500):
        missing = rng.sample(keys, rng.randrange(0, 25))
        extras = sorted({
            f"x{rng.randrange(10**9):09d}".encode()
            for _ in range(rng.randrange(0, 8))
        })
        base = dict(target)
        for k in missing:
            del base[k]
        for k in extras:
            base[k] = b"transient"
        tree = build(store, ChunkType.MAP, base)
        fixes = [("put", k, target[k]) for k in missing] + [("del", k, b"") for k in extras]
        rng.shuffle(fixes)
        for op, k, v in fixes:
            tree = tree.map_put(k, v) if op == "put" else tree.map_delete(k)
        roots.add(tree.root_cid)
    store.close()
    assert roots == {reference}
    _report(3, "500 different edit scripts land on one identical root",
            started, 60.0, f"root {reference.hex()[:12]}")


# 4 -------------------------------------------------------------------------------


def test_04_append_growth_stores_a_tenth_of_full_copies(tmp_path):
    started = time.perf_counter()
    rng = np.random.default_rng(0xACC04)
    baseline = 0
    with Engine(tmp_path / "db") as engine:
        size = 1024 * 1024
        engine.put("log", rng.bytes(size))
        baseline += size
        for _ in range(100):
            handle = engine.get("log").handle()
            handle.append(rng.bytes(1024))
            size += 1024
            engine.put("log", handle)
            baseline += size
        unique = engine.store.stats().total_payload_bytes
    ratio = unique / baseline
    assert ratio <= 0.10, f"stored {unique} of {baseline} baseline bytes"
    _report(4, "100 appended versions cost <= 10% of full copies",
            started, 30.0, f"ratio {ratio:.4f}")


# 5 -------------------------------------------------------------------------------


def test_05_point_update_writes_a_root_path_only(tmp_path):
    started = time.perf_counter()
    content = {
        f"entry-{i:06d}".encode(): f"payload-{i * 13}".encode() for i in range(100_000)
    }
    with Engine(tmp_path / "db") as engine:
        engine.put("big", content)
        obj = engine.get("big")
        height = obj.tree().height()
        before = engine.store.counters.appends
        handle = obj.handle()
        handle.put(b"entry-050000", b"rewritten payload")
        engine.put("big", handle)
        written = engine.store.counters.appends - before
    budget_chunks = 2 * height + 2
    assert written <= budget_chunks, f"{written} chunks for a height-{height} tree"
    _report(5, "single-entry update touches only the path to the root",
            started, 10.0, f"{written} chunks <= 2*{height}+2")


# 6 -------------------------------------------------------------------------------


def test_06_every_single_byte_flip_is_detected(tmp_path):
    started = time.perf_counter()
    rng = np.random.default_rng(0xACC06)
    config = EngineConfig(
        chunker=ChunkerConfig(window_size=8, target_leaf_bytes=256,
                              target_index_bytes=512)
    )
    path = tmp_path / "db"
    data = bytearray(rng.bytes(1200))
    with Engine(path, config) as engine:
        engine.put("doc", bytes(data))
        for _ in range(9):
            at = int(rng.integers(0, len(data) - 60))
            data[at : at + 50] = rng.bytes(60)
            engine.put("doc", bytes(data))
        assert engine.verify("doc") == 10

    log_path = next(p for p in path.iterdir() if p.name == "chunks.log")
    pristine = log_path.read_bytes()
    undetected = []
    for offset in range(len(pristine)):
        corrupt = bytearray(pristine)
        corrupt[offset] ^= 0x40
        log_path.write_bytes(corrupt)
        try:
            with Engine(path) as engine:
                engine.verify("doc")
            undetected.append(offset)
        except ForkStoreError:
            pass
    log_path.write_bytes(pristine)
    with Engine(path) as engine:
        assert engine.verify("doc") == 10  # intact again after restore
    assert not undetected, f"flips at {undetected[:10]} went unnoticed"
    _report(6, "every single-byte corruption fails the verified walk",
            started, 60.0, f"{len(pristine)} byte positions flipped")


# 7 -------------------------------------------------------------------------------


def _brute_force_lca(parents, depths, a, b):
    def ancestors(u):
        seen = {u}
        queue = [u]
        while queue:
            for p in parents[queue.pop()]:
                if p not in seen:
                    seen.add(p)
                    queue.append(p)
        return seen

    common = ancestors(a) & ancestors(b)
    if not common:
        return None
    deepest = max(depths[u] for u in common)
    return min(u for u in common if depths[u] == deepest)


def test_07_ancestry_and_disjoint_merge_oracles(tmp_path):
    started = time.perf_counter()
    rng = random.Random(0xACC07)
    store = ChunkStore(tmp_path / "dags")
    checked = 0
    for dag in range(1000):
        n = rng.randint(200, 1000) if dag % 100 == 0 else rng.randint(2, 40)
        key = f"dag-{dag}".encode()
        uids, parents, depths = [], {}, {}
        for i in range(n):
            bases = ()
            if uids:
                k = 2 if (len(uids) > 1 and rng.random() < 0.3) else 1
                bases = tuple(rng.sample(uids, k))
            uid = commit_version(store, key, ValueKind.INTEGER,
                                 encode_primitive(ValueKind.INTEGER, i), bases)
            parents[uid] = bases
            depths[uid] = 0 if not bases else 1 + max(depths[p] for p in bases)
            uids.append(uid)
        for _ in range(5):
            a, b = rng.choice(uids), rng.choice(uids)
            assert find_lca(store, a, b) == _brute_force_lca(parents, depths, a, b)
            checked += 1

    merge_store = ChunkStore(tmp_path / "merges")
    for case in range(200):
        entries = {f"m{i:04d}".encode(): f"v{case}-{i}".encode() for i in range(150)}
        keys = sorted(entries)
        ours_keys = rng.sample(keys, 12)
        theirs_keys = rng.sample([k for k in keys if k not in ours_keys], 12)
        base_tree = build(merge_store, ChunkType.MAP, entries)
        expected = dict(entries)

        ours = base_tree
        for i, k in enumerate(ours_keys):
            if i % 3 == 0:
                ours = ours.map_delete(k)
                expected.pop(k)
            else:
                ours = ours.map_put(k, b"ours:" + k)
                expected[k] = b"ours:" + k
        theirs = base_tree
        for i, k in enumerate(theirs_keys):
            if i % 4 == 0:
                theirs = theirs.map_delete(k)
                expected.pop(k)
            else:
                theirs = theirs.map_put(k, b"theirs:" + k)
                expected[k] = b"theirs:" + k

        merged, conflicts = merge_trees(base_tree, ours, theirs)
        assert not conflicts
        assert merged.root_cid == build(merge_store, ChunkType.MAP, expected).root_cid
    store.close()
    merge_store.close()
    _report(7, "ancestry matches brute force; disjoint merges equal patching",
            started, 60.0, f"{checked} ancestor queries, 200 merges")


# 8 -------------------------------------------------------------------------------


def test_08_concurrent_puts_fork_and_merge_collapses(tmp_path):
    started = time.perf_counter()
    with Engine(tmp_path / "db") as engine:
        base = engine.put_unconflicted("doc", {b"k": b"v0"})
        assert engine.list_untagged("doc") == [base]

        left = engine.put_unconflicted("doc", {b"k": b"v0", b"l": b"1"}, base=base)
        right = engine.put_unconflicted("doc", {b"k": b"v0", b"r": b"2"}, base=base)
        heads = set(engine.list_untagged("doc"))
        assert heads == {left, right} and len(heads) == 2

        merged = engine.merge_versions("doc", sorted(heads))
        assert engine.list_untagged("doc") == [merged]
        assert engine.get("doc", uid=merged).value() == {
            b"k": b"v0", b"l": b"1", b"r": b"2"
        }

        engine.put("named", b"branchable " * 200)
        before = engine.store.counters.appends
        engine.fork("named", "copy")
        assert engine.store.counters.appends - before == 0
    _report(8, "concurrent puts leave two heads; merge collapses; fork is free",
            started, 30.0)


# 9 -------------------------------------------------------------------------------


def test_09_history_read_cost_ignores_other_keys(tmp_path):
    started = time.perf_counter()
    rng = np.random.default_rng(0xACC09)
    fetch_counts = []
    with Engine(tmp_path / "db") as engine:
        for _ in range(8):
            engine.put("probe", rng.bytes(2048))
        have = 0
        for stage in (2**8, 2**10, 2**12, 2**15):
            while have < stage:
                engine.put(f"filler-{have}", have)
                have += 1
            before = engine.store.counters.gets
            history = engine.track("probe")
            assert len(history) == 8
            fetch_counts.append(engine.store.counters.gets - before)
    spread = max(fetch_counts) - min(fetch_counts)
    assert spread <= 1, fetch_counts
    _report(9, "tracking one key costs the same at 256 and 32768 keys",
            started, 120.0, f"fetches {fetch_counts}")


# 10 ------------------------------------------------------------------------------


def test_10_chunk_spreading_beats_creator_pinning(tmp_path):
    started = time.perf_counter()
    rows = dict(skew_balance(str(tmp_path), seed=5))
    assert rows["two_layer_max_over_mean"] <= 1.15, rows
    assert rows["one_layer_max_over_mean"] > 1.5, rows
    _report(10, "hash placement stays within 15% under a zipf workload",
            started, 120.0,
            f"spread {rows['two_layer_max_over_mean']:.3f}, "
            f"pinned {rows['one_layer_max_over_mean']:.3f}")


# 11 ------------------------------------------------------------------------------


def test_11_cluster_and_embedded_agree_everywhere(tmp_path):
    started = time.perf_counter()
    probes = [socket.create_server(("127.0.0.1", 0)) for _ in range(4)]
    ports = [s.getsockname()[1] for s in probes]
    for s in probes:
        s.close()
    spec = ClusterSpec(addrs=tuple(("127.0.0.1", p) for p in ports))
    servers = [ClusterServer(i, spec, tmp_path / "net").start() for i in range(4)]
    try:
        with Engine(tmp_path / "solo") as solo, ClusterClient(spec) as client:
            log_solo = conformance.run_script(solo, steps=90)
            log_net = conformance.run_script(client, steps=90)
            conformance.assert_equivalent(log_solo, log_net, "embedded", "cluster")
            state_solo = conformance.final_state(solo)
            state_net = conformance.final_state(client)
            assert state_solo == state_net
            values = 0
            for i in range(5):
                key = f"item-{i}"
                try:
                    branches = solo.list_branches(key)
                except ForkStoreError:
                    continue
                for uid in branches.values():
                    assert (solo.get(key, uid=uid).value()
                            == client.get(key, uid=uid).value())
                    values += 1
    finally:
        for s in servers:
            s.stop()
    _report(11, "four-node cluster replays byte-identical to embedded",
            started, 120.0, f"{len(log_solo)} steps, {values} head values compared")


# 12 ------------------------------------------------------------------------------


def test_12_column_layout_cuts_aggregation_fetches(tmp_path):
    started = time.perf_counter()
    rows = 10_000
    lines = ["id,c0,c1,c2,c3,c4,c5,c6,c7"]
    for i in range(rows):
        lines.append(f"{i:06d}," + ",".join(str(i * 31 + j * 7) for j in range(8)))
    csv_path = tmp_path / "relation.csv"
    csv_path.write_text("\n".join(lines) + "\n")

    with Engine(tmp_path / "db") as engine:
        engine.table_import("by-row", csv_path, layout="row")
        engine.table_import("by-col", csv_path, layout="column")
        expected = float(sum(i * 31 + 3 * 7 for i in range(rows)))

        before = engine.store.counters.gets
        total_row = engine.table_aggregate("by-row", "c3")
        row_fetches = engine.store.counters.gets - before

        before = engine.store.counters.gets
        total_col = engine.table_aggregate("by-col", "c3")
        col_fetches = engine.store.counters.gets - before

    assert total_row == total_col == expected
    assert row_fetches >= 5 * col_fetches, (row_fetches, col_fetches)
    _report(12, "column layout aggregates with >= 5x fewer fetches",
            started, 30.0, f"row {row_fetches}, column {col_fetches}")
