"""Stochastic graph transforms, their compositions and mixture labels.

A :class:`TransformSet` fixes the active kinds and their order; kind ``i`` in
that order is mixture component ``i`` (1-based), component 0 being the
identity. Every application draws its strength ``p`` uniformly from the
spec's ``param_domain``.
"""

from __future__ import annotations

import enum
import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .graph import Graph


class TransformKind(str, enum.Enum):
    IDENTITY = "identity"
    MASK_EDGE_FEAT = "mask_edge_feat"
    NOISY_EDGE_FEAT = "noisy_edge_feat"
    EDGE_FEAT_SHIFT = "edge_feat_shift"
    MASK_NODE_FEAT = "mask_node_feat"
    NOISY_NODE_FEAT = "noisy_node_feat"
    NODE_FEAT_SHIFT = "node_feat_shift"
    ADD_EDGE = "add_edge"
    DROP_EDGE = "drop_edge"
    DROP_NODE = "drop_node"
    DROP_PATH = "drop_path"
    RANDOM_SUBGRAPH = "random_subgraph"

    def __str__(self):
        return self.value


K = TransformKind

EDGE_FEATURE_KINDS = frozenset({K.MASK_EDGE_FEAT, K.NOISY_EDGE_FEAT, K.EDGE_FEAT_SHIFT})
PROBABILITY_KINDS = frozenset(
    {K.MASK_EDGE_FEAT, K.MASK_NODE_FEAT, K.ADD_EDGE, K.DROP_EDGE, K.DROP_NODE, K.DROP_PATH}
)
EXCLUDED_PAIRS = frozenset(
    {frozenset({K.ADD_EDGE, K.DROP_EDGE}), frozenset({K.RANDOM_SUBGRAPH, K.DROP_NODE})}
)

DEFAULT_KINDS = (K.RANDOM_SUBGRAPH, K.DROP_NODE, K.DROP_EDGE, K.ADD_EDGE, K.NOISY_NODE_FEAT)

DEFAULT_DOMAINS = {
    K.MASK_EDGE_FEAT: (0.3, 0.5),
    K.MASK_NODE_FEAT: (0.3, 0.5),
    K.ADD_EDGE: (0.3, 0.5),
    K.DROP_EDGE: (0.3, 0.5),
    K.DROP_NODE: (0.3, 0.5),
    K.DROP_PATH: (0.3, 0.5),
    K.NOISY_EDGE_FEAT: (0.05, 0.3),
    K.NOISY_NODE_FEAT: (0.05, 0.3),
    K.EDGE_FEAT_SHIFT: (0.1, 0.5),
    K.NODE_FEAT_SHIFT: (0.1, 0.5),
    K.RANDOM_SUBGRAPH: (1, 2),
}


class TransformError(ValueError):
    pass


@dataclass(frozen=True)
class TransformSpec:
    kind: TransformKind
    param_domain: tuple = None
    fill_value: float = 0.0

    def __post_init__(self):
        kind = TransformKind(self.kind)
        object.__setattr__(self, "kind", kind)
        if kind is K.IDENTITY:
            raise TransformError("identity is not a transform spec; use an empty composite")
        dom = self.param_domain if self.param_domain is not None else DEFAULT_DOMAINS[kind]
        lo, hi = (float(v) for v in dom)
        if lo > hi:
            raise TransformError(f"{kind}: empty parameter domain [{lo}, {hi}]")
        if kind in PROBABILITY_KINDS and not (0.0 <= lo and hi <= 1.0):
            raise TransformError(f"{kind}: probability domain must lie in [0, 1]")
        if kind is K.RANDOM_SUBGRAPH:
            if lo < 1 or lo != int(lo) or hi != int(hi):
                raise TransformError("random_subgraph: hop domain must be integers >= 1")
        elif lo < 0:
            raise TransformError(f"{kind}: parameter must be non-negative")
        object.__setattr__(self, "param_domain", (lo, hi))

    def draw(self, rng: np.random.Generator):
        lo, hi = self.param_domain
        if self.kind is K.RANDOM_SUBGRAPH:
            return int(rng.integers(int(lo), int(hi) + 1))
        return float(rng.uniform(lo, hi))


@dataclass(frozen=True)
class CompositeTransform:
    """Ordered specs with distinct kinds; the empty composite is the identity."""

    specs: tuple = ()

    def __post_init__(self):
        specs = tuple(self.specs)
        object.__setattr__(self, "specs", specs)
        kinds = [s.kind for s in specs]
        if len(set(kinds)) != len(kinds):
            raise TransformError(f"repeated kind in composite {kinds}")
        for a, b in itertools.combinations(kinds, 2):
            if frozenset({a, b}) in EXCLUDED_PAIRS:
                raise TransformError(f"excluded combination: {a} with {b}")

    @property
    def kinds(self) -> tuple:
        return tuple(s.kind for s in self.specs)

    def __len__(self):
        return len(self.specs)

    def is_identity(self) -> bool:
        return not self.specs


IDENTITY = CompositeTransform(())


def _as_kind(k) -> TransformKind:
    return k if isinstance(k, TransformKind) else TransformKind(k)


def valid_combination(kinds: Iterable) -> bool:
    kinds = list(kinds)
    if len(set(kinds)) != len(kinds):
        return False
    return all(frozenset(p) not in EXCLUDED_PAIRS for p in itertools.combinations(kinds, 2))


@dataclass(frozen=True)
class TransformSet:
    """The active mixture components, in index order 1..K."""

    specs: tuple = field(default_factory=lambda: tuple(TransformSpec(k) for k in DEFAULT_KINDS))

    def __post_init__(self):
        specs = tuple(s if isinstance(s, TransformSpec) else TransformSpec(s) for s in self.specs)
        if len({s.kind for s in specs}) != len(specs):
            raise TransformError("duplicate kind in transform set")
        object.__setattr__(self, "specs", specs)

    @classmethod
    def from_kinds(cls, kinds: Sequence, domains: Optional[dict] = None, fill_value=0.0):
        domains = {_as_kind(k): v for k, v in (domains or {}).items()}
        return cls(
            tuple(
                TransformSpec(_as_kind(k), domains.get(_as_kind(k)), fill_value) for k in kinds
            )
        )

    @property
    def K(self) -> int:
        return len(self.specs)

    @property
    def kinds(self) -> tuple:
        return tuple(s.kind for s in self.specs)

    def index_map(self) -> list:
        """Component names by index; entry 0 is the identity."""
        return ["identity"] + [str(k) for k in self.kinds]

    def index_of(self, kind) -> int:
        return self.kinds.index(_as_kind(kind)) + 1

    def spec(self, kind) -> TransformSpec:
        return self.specs[self.index_of(kind) - 1]

    def composite(self, kinds: Sequence) -> CompositeTransform:
        return CompositeTransform(tuple(self.spec(k) for k in kinds))

    def valid_subsets(self, size: int) -> list:
        return [
            c for c in itertools.combinations(self.kinds, size) if valid_combination(c)
        ]

    def sample_composite(self, k: int, rng: np.random.Generator) -> CompositeTransform:
        """Draw a size uniformly from 1..k, then a valid kind subset of that size
        uniformly, in shuffled order. Never returns the identity."""
        if not 1 <= k <= self.K:
            raise TransformError(f"k must be in [1, {self.K}], got {k}")
        sizes = [s for s in range(1, k + 1) if self.valid_subsets(s)]
        size = sizes[int(rng.integers(len(sizes)))]
        options = self.valid_subsets(size)
        chosen = options[int(rng.integers(len(options)))]
        order = rng.permutation(size)
        return self.composite([chosen[i] for i in order])

    def mixture_label(self, c: CompositeTransform) -> np.ndarray:
        bits = np.zeros(self.K + 1, dtype=np.int64)
        if c.is_identity():
            bits[0] = 1
        for kind in c.kinds:
            bits[self.index_of(kind)] = 1
        return bits

    def enumerate_environments(self, k: int = 2) -> list:
        """Identity, then every valid composite of size 1..k in index order."""
        envs = [IDENTITY]
        for size in range(1, k + 1):
            envs.extend(self.composite(c) for c in self.valid_subsets(size))
        return envs

    def environment_label(self, c: CompositeTransform) -> str:
        if c.is_identity():
            return "0"
        idx = sorted(self.index_of(kd) for kd in c.kinds)
        return str(idx[0]) if len(idx) == 1 else "(" + ", ".join(map(str, idx)) + ")"

    def environments_json(self, k: int = 2) -> list:
        out = []
        for i, env in enumerate(self.enumerate_environments(k)):
            out.append(
                {
                    "id": i,
                    "label": self.environment_label(env),
                    "kinds": [str(kd) for kd in env.kinds],
                    "components": [self.index_of(kd) for kd in env.kinds],
                    "param_domains": [list(s.param_domain) for s in env.specs],
                }
            )
        return out


def mixture_label(c: CompositeTransform, tset: TransformSet) -> np.ndarray:
    return tset.mixture_label(c)


def sample_composite(tset: TransformSet, k: int, rng: np.random.Generator) -> CompositeTransform:
    return tset.sample_composite(k, rng)


def enumerate_environments(tset: TransformSet, k: int = 2) -> list:
    return tset.enumerate_environments(k)


# --- graph surgery helpers -------------------------------------------------


def _edge_units(g: Graph):
    """Map each stored edge to an edge unit; an undirected edge is one unit."""
    if g.directed or g.num_edges == 0:
        return np.arange(g.num_edges), g.num_edges
    s, d = g.edge_index
    key = np.minimum(s, d) * g.num_nodes + np.maximum(s, d)
    _, inverse = np.unique(key, return_inverse=True)
    return inverse, int(inverse.max()) + 1


def _keep_edges(g: Graph, keep: np.ndarray) -> Graph:
    return g.replace(
        edge_index=g.edge_index[:, keep],
        edge_features=None if g.edge_features is None else g.edge_features[keep],
    )


def _ids(g: Graph) -> np.ndarray:
    return g.orig_ids if g.orig_ids is not None else np.arange(g.num_nodes)


def induced_subgraph(g: Graph, nodes: np.ndarray) -> Graph:
    """Subgraph on ``nodes`` (sorted index array), re-indexed densely."""
    nodes = np.asarray(nodes, dtype=np.int64)
    remap = np.full(g.num_nodes, -1, dtype=np.int64)
    remap[nodes] = np.arange(len(nodes))
    s, d = g.edge_index
    keep = (remap[s] >= 0) & (remap[d] >= 0)
    masks = None
    if g.node_masks is not None:
        masks = {k: v[nodes] for k, v in g.node_masks.items()}
    return g.replace(
        node_features=g.node_features[nodes],
        edge_index=np.stack([remap[s[keep]], remap[d[keep]]]),
        edge_features=None if g.edge_features is None else g.edge_features[keep],
        node_labels=None if g.node_labels is None else g.node_labels[nodes],
        node_masks=masks,
        orig_ids=_ids(g)[nodes],
    )


def _neighbors(g: Graph):
    """CSR adjacency (outgoing) as (indptr, indices)."""
    s, d = g.edge_index
    order = np.argsort(s, kind="stable")
    indptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, s + 1, 1)
    return np.cumsum(indptr), d[order]


def khop_nodes(g: Graph, seed: int, hops: int, csr=None) -> np.ndarray:
    indptr, indices = csr if csr is not None else _neighbors(g)
    seen = np.zeros(g.num_nodes, dtype=bool)
    seen[seed] = True
    frontier = np.array([seed])
    for _ in range(hops):
        if frontier.size == 0:
            break
        nxt = np.concatenate([indices[indptr[u] : indptr[u + 1]] for u in frontier])
        nxt = np.unique(nxt[~seen[nxt]])
        seen[nxt] = True
        frontier = nxt
    return np.flatnonzero(seen)


def disjoint_union(graphs: Sequence[Graph]) -> Graph:
    offsets = np.cumsum([0] + [g.num_nodes for g in graphs[:-1]])
    first = graphs[0]
    masks = None
    if first.node_masks is not None:
        masks = {k: np.concatenate([g.mask(k) for g in graphs]) for k in first.node_masks}
    return first.replace(
        node_features=np.concatenate([g.node_features for g in graphs]),
        edge_index=np.concatenate([g.edge_index + o for g, o in zip(graphs, offsets)], axis=1),
        edge_features=None
        if first.edge_features is None
        else np.concatenate([g.edge_features for g in graphs]),
        node_labels=None
        if first.node_labels is None
        else np.concatenate([g.node_labels for g in graphs]),
        node_masks=masks,
        orig_ids=np.concatenate([_ids(g) for g in graphs]),
    )


# --- per-kind transforms ----------------------------------------------------


def drop_edge(g: Graph, p: float, rng) -> Graph:
    unit, n_units = _edge_units(g)
    keep_unit = rng.random(n_units) >= p
    return _keep_edges(g, keep_unit[unit])


def add_edge(g: Graph, p: float, rng) -> Graph:
    """Sample as many absent node pairs as there are edge units and add each
    with probability ``p``."""
    n = g.num_nodes
    _, n_units = _edge_units(g)
    existing = set(zip(g.edge_index[0].tolist(), g.edge_index[1].tolist()))
    capacity = n * (n - 1) - len(existing)
    if not g.directed:
        capacity //= 2
    want = min(n_units, capacity)
    cand, seen = [], set()
    attempts = 0
    while len(cand) < want and attempts < 50:
        attempts += 1
        us = rng.integers(n, size=2 * (want - len(cand)) + 8)
        vs = rng.integers(n, size=us.size)
        for u, v in zip(us.tolist(), vs.tolist()):
            if u == v:
                continue
            key = (u, v) if g.directed else (min(u, v), max(u, v))
            if key in seen or key in existing:
                continue
            seen.add(key)
            cand.append(key)
            if len(cand) == want:
                break
    if not cand:
        return g
    cand = np.array(cand, dtype=np.int64).reshape(-1, 2)
    new = cand[rng.random(len(cand)) < p]
    if len(new) == 0:
        return g
    if g.directed:
        add = new.T
    else:
        add = np.concatenate([new.T, new[:, ::-1].T], axis=1)
    edge_features = g.edge_features
    if edge_features is not None:
        if g.num_edges:
            src_rows = rng.integers(g.num_edges, size=len(new))
            rows = edge_features[src_rows]
        else:
            rows = np.zeros((len(new), edge_features.shape[1]))
        if not g.directed:
            rows = np.concatenate([rows, rows])
        edge_features = np.concatenate([edge_features, rows])
    return g.replace(
        edge_index=np.concatenate([g.edge_index, add], axis=1), edge_features=edge_features
    )


def drop_node(g: Graph, p: float, rng) -> Graph:
    keep = rng.random(g.num_nodes) >= p
    tries = 0
    while not keep.any():
        tries += 1
        if tries > 100:
            keep[int(rng.integers(g.num_nodes))] = True
            break
        keep = rng.random(g.num_nodes) >= p
    return induced_subgraph(g, np.flatnonzero(keep))


def drop_path(g: Graph, p: float, rng) -> Graph:
    """Delete the edges walked by one random walk of ``ceil(p * E)`` steps,
    stopping early at the first revisited node."""
    unit, n_units = _edge_units(g)
    budget = math.ceil(p * n_units)
    if budget == 0 or g.num_edges == 0:
        return g
    s, d = g.edge_index
    order = np.argsort(s, kind="stable")
    indptr = np.zeros(g.num_nodes + 1, dtype=np.int64)
    np.add.at(indptr, s + 1, 1)
    indptr = np.cumsum(indptr)
    current = int(rng.integers(g.num_nodes))
    visited = {current}
    removed = np.zeros(n_units, dtype=bool)
    for _ in range(budget):
        lo, hi = indptr[current], indptr[current + 1]
        if hi == lo:
            break
        e = order[lo + int(rng.integers(hi - lo))]
        removed[unit[e]] = True
        nxt = int(d[e])
        if nxt in visited:
            break
        visited.add(nxt)
        current = nxt
    return _keep_edges(g, ~removed[unit])


def random_subgraph(g: Graph, hops: int, rng, targets=None) -> Graph:
    """Induced ``hops``-hop neighbourhood of a random seed node.

    Node-level graphs get one neighbourhood per target node (all nodes by
    default), joined as a disjoint union; only the centre copy of each target
    keeps its split mask. Without masks the centres are marked as ``test``.
    """
    csr = _neighbors(g)
    if g.node_labels is None:
        seed = int(rng.integers(g.num_nodes))
        return induced_subgraph(g, khop_nodes(g, seed, hops, csr))
    if targets is None:
        targets = np.arange(g.num_nodes)
    parts = []
    base_masks = g.node_masks or {}
    for t in np.asarray(targets, dtype=np.int64).tolist():
        nodes = khop_nodes(g, t, hops, csr)
        sub = induced_subgraph(g.replace(node_masks=None), nodes)
        centre = nodes == t
        masks = {k: centre & base_masks[k][t] for k in base_masks} or {"test": centre}
        parts.append(sub.replace(node_masks=masks))
    return disjoint_union(parts)


def _need_edge_features(g: Graph, kind):
    if g.edge_features is None:
        raise TransformError(f"{kind} requires edge features")


def _mask_entries(x: np.ndarray, p: float, fill: float, rng) -> np.ndarray:
    out = x.copy()
    out[rng.random(x.shape) < p] = fill
    return out


def apply_spec(g: Graph, spec: TransformSpec, rng, targets=None) -> Graph:
    kind = spec.kind
    if kind in EDGE_FEATURE_KINDS:
        _need_edge_features(g, kind)
    p = spec.draw(rng)
    if kind is K.DROP_EDGE:
        return drop_edge(g, p, rng)
    if kind is K.ADD_EDGE:
        return add_edge(g, p, rng)
    if kind is K.DROP_NODE:
        return drop_node(g, p, rng)
    if kind is K.DROP_PATH:
        return drop_path(g, p, rng)
    if kind is K.RANDOM_SUBGRAPH:
        return random_subgraph(g, p, rng, targets)
    if kind is K.NOISY_NODE_FEAT:
        return g.replace(node_features=g.node_features + rng.normal(0.0, p, g.node_features.shape))
    if kind is K.MASK_NODE_FEAT:
        return g.replace(node_features=_mask_entries(g.node_features, p, spec.fill_value, rng))
    if kind is K.NODE_FEAT_SHIFT:
        return g.replace(node_features=g.node_features + p)
    if kind is K.NOISY_EDGE_FEAT:
        return g.replace(edge_features=g.edge_features + rng.normal(0.0, p, g.edge_features.shape))
    if kind is K.MASK_EDGE_FEAT:
        return g.replace(edge_features=_mask_entries(g.edge_features, p, spec.fill_value, rng))
    if kind is K.EDGE_FEAT_SHIFT:
        return g.replace(edge_features=g.edge_features + p)
    raise TransformError(f"unsupported transform kind {kind}")


def apply(g: Graph, c: CompositeTransform, rng, targets=None) -> Graph:
    """Apply the composite's specs in order. ``targets`` selects the centre
    nodes of ``random_subgraph`` on node-level graphs."""
    if isinstance(rng, (int, np.integer)) or rng is None:
        rng = np.random.default_rng(rng)
    out = g
    for spec in c.specs:
        out = apply_spec(out, spec, rng, targets)
    return out


def num_workers() -> int:
    """Worker cap for transform application, from ``GMETRO_NUM_WORKERS``."""
    try:
        return max(1, int(os.environ.get("GMETRO_NUM_WORKERS", "1")))
    except ValueError:
        return 1


def apply_many(graphs: Sequence[Graph], composites, rngs) -> list:
    """Apply one composite per graph, in parallel when workers are allowed.

    Results keep input order and each instance owns its generator, so the
    worker count never changes the output.
    """
    jobs = list(zip(graphs, composites, rngs))
    workers = min(num_workers(), len(jobs))
    if workers <= 1:
        return [apply(g, c, r) for g, c, r in jobs]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(lambda job: apply(*job), jobs))
