"""Synthetic node- and graph-classification datasets.

Labels depend on community structure and on node features, so structural
and feature transforms both change how hard the task is.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import networkx as nx
import numpy as np

from .graph import Graph
from .io import write_graph

GENERATORS = ("sbm", "er")
LABEL_RULES = ("community", "feature_threshold", "motif_count")


@dataclass
class SyntheticSpec:
    """Generator settings.

    ``deg_in`` / ``deg_out`` are expected numbers of neighbours inside / outside
    a node's own community. ``feature_signal`` scales the class-dependent
    feature means and ``feature_noise`` the per-entry Gaussian noise.

    Graph-level community labels use two-block graphs whose node features
    mark the block; the class is how strongly the blocks mix, so edge
    transforms move a graph towards a neighbouring class.
    """

    task_kind: str = "node"
    generator: str = "sbm"
    label_rule: str = "community"
    num_classes: int = 2
    num_nodes: int = 1000
    num_graphs: int = 300
    min_nodes: int = 20
    max_nodes: int = 40
    communities: int = 2
    feature_dim: int = 8
    deg_in: float = 6.0
    deg_out: float = 1.5
    feature_signal: float = 1.0
    feature_noise: float = 1.0
    seed: int = 0

    def validate(self):
        problems = []
        if self.task_kind not in ("node", "graph"):
            problems.append("task_kind must be 'node' or 'graph'")
        if self.generator not in GENERATORS:
            problems.append(f"generator must be one of {GENERATORS}")
        if self.label_rule not in LABEL_RULES:
            problems.append(f"label_rule must be one of {LABEL_RULES}")
        if self.num_classes < 2:
            problems.append("need at least two classes")
        if self.feature_dim < 1:
            problems.append("feature_dim must be >= 1")
        if self.task_kind == "node":
            if self.num_nodes < 2 * self.num_classes:
                problems.append("num_nodes too small for the number of classes")
        else:
            if self.num_graphs < self.num_classes:
                problems.append("num_graphs must be >= num_classes")
            if not 2 <= self.min_nodes <= self.max_nodes:
                problems.append("need 2 <= min_nodes <= max_nodes")
        if self.label_rule == "community" and self.generator != "sbm":
            problems.append("community labels need the sbm generator")
        if self.deg_in < 0 or self.deg_out < 0 or (self.deg_in + self.deg_out) <= 0:
            problems.append("expected degrees must be non-negative and not both zero")
        if self.communities < 1:
            problems.append("communities must be >= 1")
        return problems


def _edge_index(nxg: nx.Graph) -> np.ndarray:
    e = np.array(sorted(nxg.edges()), dtype=np.int64).reshape(-1, 2).T
    return np.concatenate([e, e[::-1]], axis=1)


def _sbm(sizes, deg_in, deg_out, seed):
    n = sum(sizes)
    c = len(sizes)
    p_in = min(1.0, deg_in / max(n / c - 1, 1))
    p_out = min(1.0, deg_out / max(n - n / c, 1)) if c > 1 else 0.0
    probs = [[p_in if i == j else p_out for j in range(c)] for i in range(c)]
    return nx.stochastic_block_model(sizes, probs, seed=seed)


def _quantile_bins(values, num_classes):
    cuts = np.quantile(values, np.linspace(0, 1, num_classes + 1)[1:-1])
    return np.searchsorted(cuts, values, side="right").astype(np.int64)


def _class_means(rng, num_classes, dim, scale):
    mu = rng.normal(size=(num_classes, dim))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    return scale * mu


def _node_dataset(spec: SyntheticSpec, rng) -> Graph:
    n = spec.num_nodes
    if spec.generator == "sbm":
        blocks = spec.num_classes if spec.label_rule == "community" else spec.communities
        sizes = [n // blocks + (1 if i < n % blocks else 0) for i in range(blocks)]
        nxg = _sbm(sizes, spec.deg_in, spec.deg_out, int(rng.integers(2**31)))
        block = np.repeat(np.arange(blocks), sizes)
    else:
        p = min(1.0, (spec.deg_in + spec.deg_out) / max(n - 1, 1))
        nxg = nx.gnp_random_graph(n, p, seed=int(rng.integers(2**31)))
        block = np.zeros(n, dtype=np.int64)
    ei = _edge_index(nxg)
    noise = spec.feature_noise * rng.normal(size=(n, spec.feature_dim))

    if spec.label_rule == "community":
        labels = block.astype(np.int64)
        x = _class_means(rng, spec.num_classes, spec.feature_dim, spec.feature_signal)[labels] + noise
    elif spec.label_rule == "feature_threshold":
        x = noise + spec.feature_signal * rng.normal(size=(n, 1))
        deg = np.bincount(ei[1], minlength=n)
        nbr = np.zeros(n)
        np.add.at(nbr, ei[1], x[ei[0], 0])
        score = x[:, 0] + nbr / np.maximum(deg, 1)
        labels = _quantile_bins(score, spec.num_classes)
    else:
        tri = np.array([nx.triangles(nxg, i) for i in range(n)], dtype=float)
        labels = _quantile_bins(tri + 1e-3 * rng.random(n), spec.num_classes)
        x = noise
    return Graph(node_features=x, edge_index=ei, node_labels=labels)


def _one_graph(spec: SyntheticSpec, y: int, means, rng):
    """Return ``(graph, score)``; ``score`` orders graphs for quantile labels."""
    n = int(rng.integers(spec.min_nodes, spec.max_nodes + 1))
    seed = int(rng.integers(2**31))
    noise = spec.feature_noise * rng.normal(size=(n, spec.feature_dim))
    if spec.label_rule == "community":
        # two blocks whose features carry opposite signs; the class sets how
        # mixed they are, from deg_out/(deg_in+deg_out) for class 0 up to 1/2
        deg = spec.deg_in + spec.deg_out
        q = np.linspace(spec.deg_out / deg, 0.5, spec.num_classes)[y]
        sizes = [n // 2, n - n // 2]
        p_in = min(1.0, deg * (1 - q) / max(n / 2 - 1, 1))
        p_out = min(1.0, deg * q / (n / 2))
        nxg = nx.stochastic_block_model(sizes, [[p_in, p_out], [p_out, p_in]], seed=seed)
        sign = np.repeat([1.0, -1.0], sizes)
        x = sign[:, None] * means[0] + noise
        return Graph(node_features=x, edge_index=_edge_index(nxg), graph_label=y), float(y)
    if spec.label_rule == "feature_threshold":
        p = min(1.0, (spec.deg_in + spec.deg_out) / max(n - 1, 1))
        nxg = nx.gnp_random_graph(n, p, seed=seed)
        x = noise + spec.feature_signal * rng.uniform(-1, 1)
        return Graph(node_features=x, edge_index=_edge_index(nxg), graph_label=0), float(x[:, 0].mean())
    # motif_count: rewiring strength spreads triangle counts; labels set afterwards
    k = max(2, int(round(spec.deg_in + spec.deg_out)) // 2 * 2)
    beta = float(rng.uniform(0.0, 1.0))
    nxg = nx.watts_strogatz_graph(n, min(k, n - 1 - (n - 1) % 2) or 2, beta, seed=seed)
    deg = np.array([d for _, d in sorted(nxg.degree())], dtype=float)
    x = noise + np.c_[deg / max(k, 1), np.zeros((n, spec.feature_dim - 1))]
    tri = sum(nx.triangles(nxg).values()) / 3.0 / n
    return Graph(node_features=x, edge_index=_edge_index(nxg), graph_label=0), tri


def _graph_dataset(spec: SyntheticSpec, rng) -> list:
    labels = np.arange(spec.num_graphs) % spec.num_classes
    labels = labels[rng.permutation(spec.num_graphs)]
    means = _class_means(rng, spec.num_classes, spec.feature_dim, spec.feature_signal)
    graphs, scores = zip(*(_one_graph(spec, int(y), means, rng) for y in labels))
    if spec.label_rule == "community":
        return list(graphs)
    bins = _quantile_bins(scores, spec.num_classes)
    return [g.replace(graph_label=int(b)) for g, b in zip(graphs, bins)]


def generate_synthetic(spec: SyntheticSpec, out_dir: Optional[str] = None):
    """Build the dataset (a ``Graph`` for node tasks, a list for graph tasks)
    and write it to ``out_dir`` when given."""
    problems = spec.validate()
    if problems:
        raise ValueError("degenerate synthetic spec: " + "; ".join(problems))
    rng = np.random.default_rng(spec.seed)
    data = _node_dataset(spec, rng) if spec.task_kind == "node" else _graph_dataset(spec, rng)
    if out_dir is not None:
        write_graph(out_dir, data, num_classes=spec.num_classes)
    return data
