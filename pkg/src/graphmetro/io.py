"""On-disk dataset format.

Node-task dataset (a directory)::

    nodes.csv   id, x0..x{d_v-1}, label, split
    edges.csv   src, dst[, e0..e{d_e-1}]
    meta.json

Graph-task dataset (a directory)::

    graphs.jsonl   one JSON object per graph
    meta.json

``meta.json`` carries ``format_version``, ``task_kind``, ``d_v``, ``d_e``,
``num_classes`` and ``directed``. Floats are written with 17 significant
digits so a write/read round trip is exact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .graph import MASK_NAMES, Graph

FORMAT_VERSION = 1


def _fmt(v) -> str:
    return repr(float(v))


def write_meta(path: Path, **meta):
    meta = {"format_version": FORMAT_VERSION, **meta}
    Path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_meta(directory) -> dict:
    meta_path = Path(directory) / "meta.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"dataset metadata not found: {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format_version") != FORMAT_VERSION:
        raise ValueError(
            f"unsupported dataset format version {meta.get('format_version')!r}"
        )
    return meta


def write_node_dataset(directory, g: Graph, num_classes=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ids = g.orig_ids if g.orig_ids is not None else np.arange(g.num_nodes)
    split = np.full(g.num_nodes, "", dtype=object)
    for name in MASK_NAMES:
        split[g.mask(name)] = name
    with open(directory / "nodes.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"x{j}" for j in range(g.num_node_features)] + ["label", "split"])
        for i in range(g.num_nodes):
            w.writerow(
                [int(ids[i])]
                + [_fmt(v) for v in g.node_features[i]]
                + [int(g.node_labels[i]), split[i]]
            )
    with open(directory / "edges.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["src", "dst"] + [f"e{j}" for j in range(g.num_edge_features)])
        for e in range(g.num_edges):
            row = [int(ids[g.edge_index[0, e]]), int(ids[g.edge_index[1, e]])]
            if g.edge_features is not None:
                row += [_fmt(v) for v in g.edge_features[e]]
            w.writerow(row)
    if num_classes is None:
        num_classes = int(g.node_labels.max()) + 1
    write_meta(
        directory / "meta.json",
        task_kind="node",
        d_v=g.num_node_features,
        d_e=g.num_edge_features,
        num_classes=int(num_classes),
        directed=bool(g.directed),
        has_masks=g.node_masks is not None,
    )


def read_node_dataset(directory) -> Graph:
    directory = Path(directory)
    meta = read_meta(directory)
    with open(directory / "nodes.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    header, rows = rows[0], rows[1:]
    d_v = len(header) - 3
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    x = np.array([[float(v) for v in r[1 : 1 + d_v]] for r in rows]).reshape(len(rows), d_v)
    labels = np.array([int(r[1 + d_v]) for r in rows], dtype=np.int64)
    split = [r[2 + d_v] for r in rows]

    # re-index arbitrary ids to 0..N-1
    index_of = {int(v): i for i, v in enumerate(ids)}
    if len(index_of) != len(ids):
        raise ValueError("duplicate node ids in nodes.csv")
    with open(directory / "edges.csv", newline="") as fh:
        erows = list(csv.reader(fh))[1:]
    try:
        src = [index_of[int(r[0])] for r in erows]
        dst = [index_of[int(r[1])] for r in erows]
    except KeyError as exc:
        raise ValueError(f"edge references unknown node id {exc.args[0]}") from None
    edge_features = None
    if meta.get("d_e", 0):
        edge_features = np.array([[float(v) for v in r[2:]] for r in erows]).reshape(
            len(erows), meta["d_e"]
        )
    masks = None
    if meta.get("has_masks", any(split)):
        masks = {name: np.array([s == name for s in split]) for name in MASK_NAMES}
    dense = np.array_equal(ids, np.arange(len(ids)))
    return Graph(
        node_features=x,
        edge_index=np.array([src, dst], dtype=np.int64).reshape(2, -1),
        edge_features=edge_features,
        node_labels=labels,
        node_masks=masks,
        directed=bool(meta.get("directed", False)),
        orig_ids=None if dense else ids,
    )


def graph_to_dict(g: Graph) -> dict:
    d = {
        "node_features": g.node_features.tolist(),
        "edge_index": g.edge_index.tolist(),
        "directed": bool(g.directed),
    }
    if g.edge_features is not None:
        d["edge_features"] = g.edge_features.tolist()
    if g.graph_label is not None:
        d["graph_label"] = int(g.graph_label)
    if g.node_labels is not None:
        d["node_labels"] = g.node_labels.tolist()
    if g.node_masks is not None:
        d["node_masks"] = {k: v.tolist() for k, v in g.node_masks.items()}
    if g.orig_ids is not None:
        d["orig_ids"] = g.orig_ids.tolist()
    return d


def graph_from_dict(d: dict) -> Graph:
    x = np.array(d["node_features"], dtype=np.float64)
    ef = d.get("edge_features")
    ei = np.array(d["edge_index"], dtype=np.int64).reshape(2, -1)
    return Graph(
        node_features=x,
        edge_index=ei,
        edge_features=None if ef is None else np.array(ef, dtype=np.float64).reshape(ei.shape[1], -1),
        node_labels=d.get("node_labels"),
        graph_label=d.get("graph_label"),
        node_masks=d.get("node_masks"),
        directed=d.get("directed", False),
        orig_ids=d.get("orig_ids"),
    )


def write_graph_dataset(directory, graphs, num_classes=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    graphs = list(graphs)
    with open(directory / "graphs.jsonl", "w") as fh:
        for g in graphs:
            # json emits floats via repr, which round-trips exactly
            fh.write(json.dumps(graph_to_dict(g), separators=(",", ":")) + "\n")
    if num_classes is None:
        num_classes = max(g.graph_label for g in graphs) + 1
    first = graphs[0]
    write_meta(
        directory / "meta.json",
        task_kind="graph",
        d_v=first.num_node_features,
        d_e=first.num_edge_features,
        num_classes=int(num_classes),
        directed=bool(first.directed),
    )


def read_graph_dataset(directory) -> list:
    directory = Path(directory)
    read_meta(directory)
    with open(directory / "graphs.jsonl") as fh:
        return [graph_from_dict(json.loads(line)) for line in fh if line.strip()]


def write_graph(path, data, num_classes=None):
    """Write a node-task ``Graph`` or a list of graph-task graphs to ``path``."""
    if isinstance(data, Graph):
        write_node_dataset(path, data, num_classes)
    else:
        write_graph_dataset(path, data, num_classes)


def read_graph(path):
    """Read a dataset directory; returns a ``Graph`` (node task) or a list of graphs."""
    meta = read_meta(path)
    if meta["task_kind"] == "node":
        return read_node_dataset(path)
    return read_graph_dataset(path)
