"""Environment scoring, invariance matrix, shift discovery and seed statistics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from scipy import stats

from .graph import DatasetSplit, Graph
from .losses import alignment_distance
from .model import MoEModel
from .nn import collate
from .training import instance_rng
from .transforms import CompositeTransform, TransformSet, apply, apply_many

METRICS = ("accuracy", "roc_auc")


@dataclass
class EnvResult:
    env_id: int
    env_label: str
    metric: str
    value: float
    seed: int


@dataclass
class InvarianceMatrix:
    I: np.ndarray
    I_norm: np.ndarray
    normalization: str = "row_minmax"


@dataclass
class ShiftReport:
    mean_probs: np.ndarray
    component_names: list
    per_instance: Optional[np.ndarray] = None
    gating_accuracy: Optional[float] = None

    def ranking(self, include_identity=False) -> list:
        """Component names, most probable first."""
        start = 0 if include_identity else 1
        order = np.argsort(-self.mean_probs[start:], kind="stable") + start
        return [self.component_names[i] for i in order]

    def to_dict(self) -> dict:
        d = {
            "components": list(self.component_names),
            "mean_probs": [float(v) for v in self.mean_probs],
            "gating_accuracy": None if self.gating_accuracy is None else float(self.gating_accuracy),
        }
        return d


def _module(model):
    return getattr(model, "module_", model)


def _dtype(model):
    return next(model.parameters()).dtype


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels)
    if set(np.unique(labels).tolist()) - {0, 1}:
        raise ValueError("roc_auc requires binary labels")
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = stats.rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def score(logits: torch.Tensor, labels, metric="accuracy") -> float:
    labels = np.asarray(labels)
    if metric == "accuracy":
        return float((logits.argmax(-1).numpy() == labels).mean())
    if metric == "roc_auc":
        if logits.shape[-1] != 2:
            raise ValueError("roc_auc requires a binary task")
        return roc_auc(torch.softmax(logits, -1)[:, 1].numpy(), labels)
    raise ValueError(f"unknown metric {metric!r}")


@torch.no_grad()
def _logits(model, graphs):
    model.eval()
    return model(collate(graphs, _dtype(model)))[0]


def transform_test_set(split: DatasetSplit, env: CompositeTransform, env_id: int, seed: int):
    """Test instances of ``split`` under ``env``, seeded per (seed, env, instance)."""
    if split.task_kind == "graph":
        n = len(split.test)
        return apply_many(split.test, [env] * n, [instance_rng(seed, env_id, i) for i in range(n)])
    g = split.graph
    return apply(g, env, instance_rng(seed, env_id, 0), targets=np.flatnonzero(g.mask("test")))


def evaluate_environments(
    model,
    split: DatasetSplit,
    tset: TransformSet,
    environments: Optional[Sequence[CompositeTransform]] = None,
    seeds: Sequence[int] = (0,),
    metric: str = "accuracy",
    k: int = 2,
) -> list:
    """Score ``model`` on every environment; the identity environment is the
    untransformed test split."""
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    module = _module(model)
    envs = tset.enumerate_environments(k) if environments is None else list(environments)
    results = []
    for seed in seeds:
        for env_id, env in enumerate(envs):
            data = transform_test_set(split, env, env_id, seed)
            if split.task_kind == "graph":
                logits = _logits(module, data)
                labels = [g.graph_label for g in data]
            else:
                m = data.mask("test")
                logits = _logits(module, [data])[torch.from_numpy(np.array(m))]
                labels = data.node_labels[m]
            results.append(
                EnvResult(env_id, tset.environment_label(env), metric, score(logits, labels, metric), seed)
            )
    return results


def _normalize(I: np.ndarray, mode: str) -> np.ndarray:
    if mode == "row_minmax":
        lo = I.min(axis=1, keepdims=True)
        span = I.max(axis=1, keepdims=True) - lo
        return np.divide(I - lo, span, out=np.zeros_like(I), where=span > 0)
    if mode == "global_max":
        top = I.max()
        return I / top if top > 0 else np.zeros_like(I)
    raise ValueError(f"unknown normalization {mode!r}")


@torch.no_grad()
def invariance_matrix(
    model,
    sample,
    tset: TransformSet,
    trials: int = 100,
    seed: int = 0,
    normalization: str = "row_minmax",
) -> InvarianceMatrix:
    """Mean distance between expert ``i`` on ``tau_j``-transformed inputs and
    the reference expert on the clean inputs, for ``i, j`` in ``1..K``.

    ``sample`` is a list of graphs, or a node-level graph whose ``test`` mask
    (all nodes if it has none) selects the nodes compared.
    """
    module = _module(model)
    if not isinstance(module, MoEModel):
        raise TypeError("invariance matrix needs a mixture-of-experts model")
    module.eval()
    dtype = _dtype(module)
    K = tset.K
    total = np.zeros((K, K))
    if isinstance(sample, Graph):
        g = sample
        nodes = np.flatnonzero(g.mask("test")) if g.node_masks else np.arange(g.num_nodes)
        if len(nodes) == 0:
            raise ValueError("empty sample")
        if g.node_masks is None:
            g = g.replace(node_masks={"test": np.ones(g.num_nodes, dtype=bool)})
        ref = module.reference_forward(collate([g], dtype))
        for j in range(K):
            env = tset.composite([tset.kinds[j]])
            for t in range(trials):
                gt = apply(g, env, instance_rng(seed, j, t), targets=nodes)
                sel = np.flatnonzero(gt.mask("test"))
                ids = gt.orig_ids[sel] if gt.orig_ids is not None else sel
                Z = module.experts_forward(collate([gt], dtype))[torch.from_numpy(sel)]
                for i in range(K):
                    total[i, j] += float(alignment_distance(Z[:, i + 1], ref[torch.from_numpy(np.array(ids))]))
        I = total / trials
    else:
        graphs = list(sample)
        if not graphs:
            raise ValueError("empty sample")
        ref = module.reference_forward(collate(graphs, dtype))
        for j in range(K):
            env = tset.composite([tset.kinds[j]])
            for t in range(trials):
                gts = [apply(g, env, instance_rng(seed, j, t, n)) for n, g in enumerate(graphs)]
                Z = module.experts_forward(collate(gts, dtype))
                # one pooled row per graph, so n = 1 in the distance
                d = torch.linalg.vector_norm(Z[:, 1:] - ref.unsqueeze(1), dim=-1)
                total[:, j] += d.sum(0).numpy()
        I = total / (trials * len(graphs))
    return InvarianceMatrix(I, _normalize(I, normalization), normalization)


@torch.no_grad()
def gate_probabilities(model, data) -> np.ndarray:
    """Sigmoid gate outputs: one row per graph, or per node of a node-level graph."""
    module = _module(model)
    module.eval()
    graphs = [data] if isinstance(data, Graph) else list(data)
    return torch.sigmoid(module.gate_forward(collate(graphs, _dtype(module)))).numpy()


def gating_accuracy(model, source, tset: TransformSet, seed: int = 0, k: int = 1) -> float:
    """Multitask binary accuracy of the gate on probes built from ``source``.

    Each probe is ``source`` under the identity or one composite of at most
    ``k`` kinds (every valid one, in turn); accuracy averages the
    thresholded-sigmoid agreement over every component bit and instance.
    """
    envs = tset.enumerate_environments(k)
    hits = []
    for env_id, env in enumerate(envs):
        bits = tset.mixture_label(env)
        if isinstance(source, Graph):
            nodes = np.flatnonzero(source.mask("test")) if source.node_masks else np.arange(source.num_nodes)
            g = source if source.node_masks else source.replace(node_masks={"test": np.ones(source.num_nodes, bool)})
            gt = apply(g, env, instance_rng(seed, env_id, 0), targets=nodes)
            probs = gate_probabilities(model, gt)[gt.mask("test")]
        else:
            gts = [apply(g, env, instance_rng(seed, env_id, i)) for i, g in enumerate(source)]
            probs = gate_probabilities(model, gts)
        hits.append(((probs > 0.5) == bits.astype(bool)).reshape(-1))
    return float(np.concatenate(hits).mean())


def discover_shifts(model, target, tset: TransformSet, probes=None, seed: int = 0) -> ShiftReport:
    """Average the gate's component probabilities over unlabelled ``target``
    instances (per node for node-level graphs). With ``probes`` (labelled
    source data) the report also carries the gate's multitask accuracy on
    single-transform probes."""
    if isinstance(target, Graph) and target.node_masks:
        per = gate_probabilities(model, target)[target.mask("test")]
    else:
        per = gate_probabilities(model, target)
    acc = None if probes is None else gating_accuracy(model, probes, tset, seed)
    return ShiftReport(per.mean(axis=0), tset.index_map(), per, acc)


def welch_test(a, b):
    """Two-sided Welch t-test; returns ``(t, p)``. Degenerate zero-variance
    inputs give ``p = 1`` when the means agree and ``p = 0`` otherwise."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.var(ddof=1) == 0 and b.var(ddof=1) == 0:
        return 0.0, 1.0 if a.mean() == b.mean() else 0.0
    with warnings.catch_warnings():
        # near-identical samples trip a precision warning; the statistic is still defined
        warnings.simplefilter("ignore", RuntimeWarning)
        res = stats.ttest_ind(a, b, equal_var=False)
    return float(res.statistic), float(res.pvalue)


def summarize_trials(results: Sequence[EnvResult], baseline: Sequence[EnvResult]) -> list:
    """Per-environment and overall mean/std across seeds, with the Welch
    p-value of ``results`` against ``baseline``.

    The ``shifted`` row averages every non-identity environment per seed
    before taking statistics across seeds; ``all`` includes the identity.
    Standard deviations use ``ddof=1``.
    """

    def table(rs):
        seeds = sorted({r.seed for r in rs})
        envs = sorted({(r.env_id, r.env_label) for r in rs})
        if len(seeds) < 2:
            raise ValueError("need at least two seeds")
        m = np.full((len(seeds), len(envs)), np.nan)
        for r in rs:
            m[seeds.index(r.seed), envs.index((r.env_id, r.env_label))] = r.value
        return envs, m

    envs, m = table(results)
    envs_b, mb = table(baseline)
    if envs != envs_b:
        raise ValueError("results and baseline cover different environments")
    rows = []

    def add(label, a, b):
        t, p = welch_test(a, b)
        rows.append(
            {
                "env": label,
                "mean": float(np.mean(a)),
                "std": float(np.std(a, ddof=1)),
                "baseline_mean": float(np.mean(b)),
                "baseline_std": float(np.std(b, ddof=1)),
                "t": t,
                "p_value": p,
            }
        )

    for j, (_, label) in enumerate(envs):
        add(label, m[:, j], mb[:, j])
    shifted = [j for j, (eid, _) in enumerate(envs) if eid != 0]
    if shifted:
        add("shifted", m[:, shifted].mean(1), mb[:, shifted].mean(1))
    add("all", m.mean(1), mb.mean(1))
    return rows
