"""Seeded workload scenarios with a full-copy baseline for comparison.

Every scenario is deterministic for a given seed: the rows it reports
(other than wall-clock timings, which carry a ``_seconds`` suffix) come
out identical on every run. The baseline stores each version as a whole
value with no sharing, which is what the chunk-level dedup is up against.

Scenarios:

* ``wiki-edit``      pages around 15KB, a mix of in-place edits and new pages
* ``dedup-growth``   one large value growing by small appends, version by version
* ``history-track``  cost of reading one key's history as the key count grows
* ``skew-balance``   byte spread across 16 stores under zipf(0.5) key popularity
* ``micro-ops``      raw operation counts and timings on small values
"""

from __future__ import annotations

import json
import time

import numpy as np

from .chunking import ChunkerConfig
from .cluster import LocalCluster, store_payload_bytes
from .engine import Engine, EngineConfig

Rows = "list[tuple[str, object]]"


class FullCopyBaseline:
    """Versioning without structural sharing: every version costs its
    whole serialized value. Only the byte accounting is kept."""

    def __init__(self):
        self.total_bytes = 0
        self.versions = 0

    def put(self, value_bytes: int) -> None:
        self.total_bytes += value_bytes
        self.versions += 1


def _splice(rng, page: bytes) -> bytes:
    at = int(rng.integers(0, max(1, len(page) - 200)))
    patch = rng.bytes(int(rng.integers(20, 200)))
    return page[:at] + patch + page[at + len(patch):]


def wiki_edit(workdir, seed: int = 0, pages: int = 48, edits: int = 240,
              update_ratio: float = 0.8) -> Rows:
    """Page store under a wiki-like mix of updates and new pages."""
    rng = np.random.default_rng(seed)
    started = time.perf_counter()
    baseline = FullCopyBaseline()
    contents = {}
    with Engine(f"{workdir}/wiki") as engine:
        for i in range(pages):
            name = f"page-{i}"
            contents[name] = rng.bytes(15 * 1024)
            engine.put(name, contents[name])
            baseline.put(len(contents[name]))
        names = sorted(contents)
        for _ in range(edits):
            if rng.random() < update_ratio:
                name = names[int(rng.integers(0, len(names)))]
                contents[name] = _splice(rng, contents[name])
            else:
                name = f"page-{len(contents)}"
                contents[name] = rng.bytes(15 * 1024)
                names.append(name)
            engine.put(name, contents[name])
            baseline.put(len(contents[name]))
        stats = engine.store.stats()
        elapsed = time.perf_counter() - started
        return [
            ("pages", len(contents)),
            ("versions", baseline.versions),
            ("engine_unique_bytes", stats.total_payload_bytes),
            ("engine_log_bytes", stats.log_file_bytes),
            ("baseline_bytes", baseline.total_bytes),
            ("bytes_ratio", round(stats.total_payload_bytes / baseline.total_bytes, 4)),
            ("dedup_hits", stats.dedup_hit_count),
            ("wall_seconds", round(elapsed, 3)),
        ]


def dedup_growth(workdir, seed: int = 0, appends: int = 100,
                 base_bytes: int = 1024 * 1024, step_bytes: int = 1024) -> Rows:
    """One value that only ever grows; unique bytes should track the
    growth, not the number of versions."""
    rng = np.random.default_rng(seed)
    started = time.perf_counter()
    baseline = FullCopyBaseline()
    with Engine(f"{workdir}/growth") as engine:
        size = base_bytes
        engine.put("log", rng.bytes(size))
        baseline.put(size)
        for _ in range(appends):
            handle = engine.get("log").handle()
            handle.append(rng.bytes(step_bytes))
            size += step_bytes
            engine.put("log", handle)
            baseline.put(size)
        stats = engine.store.stats()
        elapsed = time.perf_counter() - started
        return [
            ("versions", baseline.versions),
            ("final_value_bytes", size),
            ("engine_unique_bytes", stats.total_payload_bytes),
            ("baseline_bytes", baseline.total_bytes),
            ("bytes_ratio", round(stats.total_payload_bytes / baseline.total_bytes, 4)),
            ("wall_seconds", round(elapsed, 3)),
        ]


def history_track(workdir, seed: int = 0, probe_versions: int = 6,
                  key_counts: tuple = (256, 1024, 4096)) -> Rows:
    """Chunk fetches needed to read one key's history, measured while the
    total key population grows around it."""
    rng = np.random.default_rng(seed)
    started = time.perf_counter()
    rows: list = []
    with Engine(f"{workdir}/track") as engine:
        for _ in range(probe_versions):
            engine.put("probe", rng.bytes(2048))
        have = 0
        fetch_counts = []
        for target in sorted(key_counts):
            while have < target:
                engine.put(f"filler-{have}", rng.bytes(512))
                have += 1
            before = engine.store.counters.gets
            history = engine.track("probe")
            fetches = engine.store.counters.gets - before
            assert len(history) == probe_versions
            fetch_counts.append(fetches)
            rows.append((f"track_fetches_at_{target}_keys", fetches))
        rows.append(("track_fetch_spread", max(fetch_counts) - min(fetch_counts)))
        rows.append(("wall_seconds", round(time.perf_counter() - started, 3)))
        return rows


def skew_balance(workdir, seed: int = 0, stores: int = 16, keys: int = 40,
                 puts: int = 900, value_bytes: int = 6000) -> Rows:
    """Byte spread across stores when key popularity follows zipf(0.5),
    with chunk-hash placement against creator-pinned placement."""
    rng = np.random.default_rng(seed)
    started = time.perf_counter()
    weights = np.array([1.0 / ((i + 1) ** 0.5) for i in range(keys)])
    weights /= weights.sum()
    picks = rng.choice(keys, size=puts, p=weights)
    config = EngineConfig(
        chunker=ChunkerConfig(window_size=16, target_leaf_bytes=512,
                              target_index_bytes=1024)
    )

    def run(tag: str, spread: bool) -> list:
        with LocalCluster(f"{workdir}/balance-{tag}", n=stores,
                          config=config, spread=spread) as cluster:
            for idx in picks:
                cluster.put(f"key-{int(idx)}", rng.bytes(value_bytes))
            return [store_payload_bytes(node.store) for node in cluster.nodes]

    spread_loads = run("two-layer", True)
    pinned_loads = run("one-layer", False)
    mean_spread = sum(spread_loads) / stores
    mean_pinned = sum(pinned_loads) / stores
    return [
        ("stores", stores),
        ("puts", puts),
        ("two_layer_max_over_mean", round(max(spread_loads) / mean_spread, 4)),
        ("two_layer_min_over_mean", round(min(spread_loads) / mean_spread, 4)),
        ("one_layer_max_over_mean", round(max(pinned_loads) / mean_pinned, 4)),
        ("wall_seconds", round(time.perf_counter() - started, 3)),
    ]


def micro_ops(workdir, seed: int = 0, count: int = 300) -> Rows:
    """Throughput sanity numbers for small single-key operations."""
    rng = np.random.default_rng(seed)
    rows: list = []
    with Engine(f"{workdir}/micro") as engine:
        payloads = [rng.bytes(int(rng.integers(64, 2048))) for _ in range(count)]
        t0 = time.perf_counter()
        for i, payload in enumerate(payloads):
            engine.put(f"k-{i % 16}", payload)
        t1 = time.perf_counter()
        for i in range(count):
            engine.get(f"k-{i % 16}").value()
        t2 = time.perf_counter()
        forks = merges = 0
        for i in range(16):
            engine.fork(f"k-{i}", "side")
            engine.put(f"k-{i}", rng.bytes(512), branch="side")
            engine.merge(f"k-{i}", "master", ref_branch="side")
            forks += 1
            merges += 1
        t3 = time.perf_counter()
        rows += [
            ("puts", count),
            ("gets", count),
            ("forks", forks),
            ("merges", merges),
            ("chunks_written", engine.store.counters.appends),
            ("chunks_fetched", engine.store.counters.gets),
            ("put_seconds", round(t1 - t0, 3)),
            ("get_seconds", round(t2 - t1, 3)),
            ("fork_merge_seconds", round(t3 - t2, 3)),
        ]
        return rows


SCENARIOS = {
    "wiki-edit": wiki_edit,
    "dedup-growth": dedup_growth,
    "history-track": history_track,
    "skew-balance": skew_balance,
    "micro-ops": micro_ops,
}


def run_scenario(name: str, workdir, seed: int = 0) -> Rows:
    try:
        fn = SCENARIOS[name]
    except KeyError:
        raise ValueError(
            f"unknown scenario {name!r}; pick one of {', '.join(sorted(SCENARIOS))}"
        ) from None
    return fn(workdir, seed=seed)


def rows_to_csv(rows) -> str:
    return "metric,value\n" + "\n".join(f"{metric},{value}" for metric, value in rows) + "\n"


def rows_to_json(rows) -> str:
    return json.dumps({metric: value for metric, value in rows}, indent=2) + "\n"
