import numpy as np
import pytest
import torch

from graphmetro.graph import Graph


def undirected(edges, n, x=None, **kw):
    e = np.array(edges, dtype=np.int64).reshape(-1, 2).T
    ei = np.concatenate([e, e[::-1]], axis=1)
    if x is None:
        x = np.arange(n * 2, dtype=float).reshape(n, 2)
    return Graph(node_features=x, edge_index=ei, **kw)


def ring(n, **kw):
    return undirected([(i, (i + 1) % n) for i in range(n)], n, **kw)


def random_graph(rng, n=None, p=0.3, d=3, label=0):
    n = n or int(rng.integers(3, 12))
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p]
    return undirected(edges, n, x=rng.normal(size=(n, d)), graph_label=label)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _threads():
    torch.set_num_threads(1)


# one line per acceptance criterion, printed after the run
CRITERIA = {}


def record(number, passed, detail):
    CRITERIA[number] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        passed, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
