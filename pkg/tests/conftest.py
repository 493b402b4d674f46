from __future__ import annotations

import numpy as np
import pytest

from forkstore.store import ChunkStore


@pytest.fixture
def store(tmp_path):
    s = ChunkStore(tmp_path / "store")
    yield s
    try:
        s.close()
    except Exception:
        pass


@pytest.fixture
def rng():
    return np.random.default_rng(0xF0C5)


def pytest_addoption(parser):
    parser.addoption(
        "--run-slow",
        action="store_true",
        default=False,
        help="run slow large-input tests outside the acceptance suite",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--run-slow"):
        return
    skip = pytest.mark.skip(reason="needs --run-slow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: large-input test, run with --run-slow")
