"""Attributed graph container, dataset splitting and pooling."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

MASK_NAMES = ("train", "val", "test")


def _frozen(a, dtype):
    if a is None:
        return None
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Graph:
    """An attributed graph.

    Arrays are copied and made read-only on construction, so a ``Graph`` can be
    shared freely; derive modified graphs with :meth:`replace`.

    Parameters
    ----------
    node_features : array of shape (N, d_v)
    edge_index : int array of shape (2, E)
        Directed storage. Undirected graphs hold both directions of every edge.
    edge_features : array of shape (E, d_e), optional
    node_labels : int array of shape (N,), optional
        Present for node-level tasks.
    graph_label : int, optional
        Present for graph-level tasks.
    node_masks : dict name -> bool array of shape (N,), optional
        Keys among ``train``, ``val``, ``test``.
    directed : bool
    orig_ids : int array of shape (N,), optional
        Identifier of each node in the graph this one was derived from.
        Transforms use it to match surviving nodes with their source nodes.
    """

    node_features: np.ndarray
    edge_index: np.ndarray
    edge_features: Optional[np.ndarray] = None
    node_labels: Optional[np.ndarray] = None
    graph_label: Optional[int] = None
    node_masks: Optional[dict] = None
    directed: bool = False
    orig_ids: Optional[np.ndarray] = None

    def __post_init__(self):
        x = _frozen(self.node_features, np.float64)
        if x.ndim == 1:
            x = _frozen(x.reshape(-1, 1), np.float64)
        ei = np.asarray(self.edge_index, dtype=np.int64)
        if ei.size == 0:
            ei = np.zeros((2, 0), dtype=np.int64)
        elif ei.ndim == 2 and ei.shape[0] != 2 and ei.shape[1] == 2:
            ei = ei.T
        object.__setattr__(self, "node_features", x)
        object.__setattr__(self, "edge_index", _frozen(ei, np.int64))
        object.__setattr__(self, "edge_features", _frozen(self.edge_features, np.float64))
        object.__setattr__(self, "node_labels", _frozen(self.node_labels, np.int64))
        object.__setattr__(self, "orig_ids", _frozen(self.orig_ids, np.int64))
        if self.graph_label is not None:
            object.__setattr__(self, "graph_label", int(self.graph_label))
        if self.node_masks is not None:
            masks = {k: _frozen(v, bool) for k, v in self.node_masks.items()}
            object.__setattr__(self, "node_masks", masks)

    @property
    def num_nodes(self) -> int:
        return int(self.node_features.shape[0])

    @property
    def num_edges(self) -> int:
        return int(self.edge_index.shape[1])

    @property
    def num_node_features(self) -> int:
        return int(self.node_features.shape[1])

    @property
    def num_edge_features(self) -> int:
        return 0 if self.edge_features is None else int(self.edge_features.shape[1])

    @property
    def task_kind(self) -> str:
        return "node" if self.node_labels is not None else "graph"

    def replace(self, **changes) -> "Graph":
        return dataclasses.replace(self, **changes)

    def mask(self, name: str) -> np.ndarray:
        if self.node_masks is None or name not in self.node_masks:
            return np.zeros(self.num_nodes, dtype=bool)
        return self.node_masks[name]

    def equals(self, other: "Graph") -> bool:
        """Exact equality of every field."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and np.array_equal(a, b)

        if not isinstance(other, Graph):
            return False
        if self.directed != other.directed or self.graph_label != other.graph_label:
            return False
        for name in ("node_features", "edge_index", "edge_features", "node_labels", "orig_ids"):
            if not same(getattr(self, name), getattr(other, name)):
                return False
        ma, mb = self.node_masks or {}, other.node_masks or {}
        if set(ma) != set(mb):
            return False
        return all(np.array_equal(ma[k], mb[k]) for k in ma)


def validate_graph(g: Graph) -> list:
    """Return a list of invariant violations; empty when ``g`` is well formed."""
    problems = []
    n = g.num_nodes
    if g.node_features.ndim != 2:
        problems.append("node features must be a matrix")
    if g.edge_index.ndim != 2 or g.edge_index.shape[0] != 2:
        problems.append("edge index must have shape (2, E)")
        return problems
    edges_ok = not (g.num_edges and (g.edge_index.min() < 0 or g.edge_index.max() >= n))
    if not edges_ok:
        problems.append("edge endpoint out of range")
    if g.edge_features is not None and (
        g.edge_features.ndim != 2 or g.edge_features.shape[0] != g.num_edges
    ):
        problems.append("edge feature row mismatch")
    # unlabelled graphs are fine (e.g. discovery targets); both kinds are not
    if g.node_labels is not None and g.graph_label is not None:
        problems.append("both node labels and a graph label are set")
    if g.node_labels is not None and g.node_labels.shape != (n,):
        problems.append("node label length mismatch")
    if g.orig_ids is not None and g.orig_ids.shape != (n,):
        problems.append("orig id length mismatch")
    if g.node_masks:
        for name, m in g.node_masks.items():
            if name not in MASK_NAMES:
                problems.append(f"unknown mask {name!r}")
            if m.shape != (n,):
                problems.append(f"mask {name!r} length mismatch")
        if all(m.shape == (n,) for m in g.node_masks.values()):
            stacked = np.stack(list(g.node_masks.values())).astype(int)
            if (stacked.sum(axis=0) > 1).any():
                problems.append("node masks overlap")
    if not g.directed and g.num_edges and edges_ok:
        fwd = set(zip(g.edge_index[0].tolist(), g.edge_index[1].tolist()))
        if any((d, s) not in fwd for s, d in fwd):
            problems.append("undirected graph missing a reverse edge")
    return problems


@dataclass
class DatasetSplit:
    """Train/val/test partition.

    Graph tasks hold lists of graphs. Node tasks hold index arrays into
    ``graph``, whose ``node_masks`` encode the same partition.
    """

    task_kind: str
    train: Sequence
    val: Sequence
    test: Sequence
    graph: Optional[Graph] = None
    num_classes: int = field(default=0)

    def sizes(self):
        return len(self.train), len(self.val), len(self.test)


def _split_sizes(n, fractions):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3:
        raise ValueError("fractions must have three entries (train, val, test)")
    if any(not 0.0 < f < 1.0 for f in fractions):
        raise ValueError(f"fractions must lie in (0, 1), got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions):g}")
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"{n} items cannot fill every split with {fractions}")
    return n_train, n_val, n_test


def split_dataset(
    data: Union[Graph, Sequence[Graph]],
    fractions=(0.8, 0.1, 0.1),
    seed: int = 0,
) -> DatasetSplit:
    """Randomly partition graphs (graph task) or the nodes of one graph (node task)."""
    rng = np.random.default_rng(seed)
    if isinstance(data, Graph):
        g = data
        if g.node_labels is None:
            raise ValueError("node-level split requires node labels")
        n_train, n_val, _ = _split_sizes(g.num_nodes, fractions)
        perm = rng.permutation(g.num_nodes)
        idx = (
            np.sort(perm[:n_train]),
            np.sort(perm[n_train : n_train + n_val]),
            np.sort(perm[n_train + n_val :]),
        )
        masks = {}
        for name, ids in zip(MASK_NAMES, idx):
            m = np.zeros(g.num_nodes, dtype=bool)
            m[ids] = True
            masks[name] = m
        g = g.replace(node_masks=masks)
        return DatasetSplit("node", *idx, graph=g, num_classes=int(g.node_labels.max()) + 1)

    graphs = list(data)
    if not graphs:
        raise ValueError("cannot split an empty dataset")
    n_train, n_val, _ = _split_sizes(len(graphs), fractions)
    perm = rng.permutation(len(graphs))
    pick = lambda ids: [graphs[i] for i in ids]  # noqa: E731
    labels = [gr.graph_label for gr in graphs if gr.graph_label is not None]
    return DatasetSplit(
        "graph",
        pick(perm[:n_train]),
        pick(perm[n_train : n_train + n_val]),
        pick(perm[n_train + n_val :]),
        num_classes=max(labels) + 1 if labels else 0,
    )


def pool(node_reps, mode: str = "add"):
    """Column-wise sum or mean of node representations.

    Each column is summed in sorted order so the result does not depend on
    the row order, bit for bit.
    """
    x = np.asarray(node_reps, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise ValueError("pool needs a non-empty (N, v) matrix")
    total = np.sort(x, axis=0).sum(axis=0)
    if mode == "add":
        return total
    if mode == "mean":
        return total / x.shape[0]
    raise ValueError(f"unknown pooling mode {mode!r}")
