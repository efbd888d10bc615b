import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from sterling.bigraph import BipartiteGraph  # noqa: E402
from sterling.config import RunConfig  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]


def make_graph(seed, n_u=8, n_v=7, p=0.4):
    rng = np.random.default_rng(seed)
    mask = rng.random((n_u, n_v)) < p
    mask[np.arange(n_u), rng.integers(0, n_v, size=n_u)] = True
    return BipartiteGraph(n_u, n_v, np.argwhere(mask))


def small_config(**model):
    cfg = RunConfig()
    cfg.data.kind = "planted"
    m = cfg.model
    m.d, m.n_clusters, m.n_knn, m.epochs, m.lr = 8, 3, 3, 3, 1e-2
    for k, v in model.items():
        setattr(m, k, v)
    return cfg


@pytest.fixture
def graph():
    return make_graph(0)


@pytest.fixture
def root():
    return ROOT


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
