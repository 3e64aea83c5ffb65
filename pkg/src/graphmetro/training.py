"""Training loops for GraphMETRO, ERM and ERM-Aug."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .graph import DatasetSplit, Graph
from .losses import LossBreakdown, StepInput, erm_objective, total_objective
from .model import MoEModel
from .nn import collate
from .transforms import IDENTITY, CompositeTransform, TransformSet, apply, apply_many

logger = logging.getLogger(__name__)

METHODS = ("graphmetro", "erm", "erm_aug")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    method: str = "graphmetro"
    learning_rate: float = 1e-3
    epochs: int = 100
    batch_size: int = 32
    lam: float = 1.0
    k: int = 2
    seed: int = 0
    weight_decay: float = 0.0
    identity_prob: Optional[float] = None
    steps_per_epoch: int = 1
    subgraph_targets: int = 128
    max_bad_steps: int = 3

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.identity_prob is not None and not 0 <= self.identity_prob <= 1:
            raise ValueError("identity_prob must lie in [0, 1]")


def draw_training_transform(tset: TransformSet, k: int, rng, identity_prob=None) -> CompositeTransform:
    """Identity with probability ``identity_prob`` (default ``1/(K+1)``),
    otherwise a random composite of at most ``k`` kinds."""
    if tset.K == 0:
        return IDENTITY
    if identity_prob is None:
        identity_prob = 1.0 / (tset.K + 1)
    if rng.random() < identity_prob:
        return IDENTITY
    return tset.sample_composite(min(k, tset.K), rng)


def instance_rng(*key) -> np.random.Generator:
    """Independent generator for one (root seed, ..., instance) key."""
    return np.random.default_rng([int(v) for v in key])


def _mix_tensor(tset, composites, dtype):
    return torch.as_tensor(np.stack([tset.mixture_label(c) for c in composites]), dtype=dtype)


def graph_step_input(graphs: Sequence[Graph], composites, rngs, tset, dtype=torch.float32):
    transformed = apply_many(graphs, composites, rngs)
    b = len(graphs)
    rows = torch.arange(b)
    return StepInput(
        transformed=collate(transformed, dtype),
        source=collate(graphs, dtype),
        y=torch.as_tensor([g.graph_label for g in graphs], dtype=torch.long),
        mix=_mix_tensor(tset, composites, dtype),
        rows_t=rows,
        rows_s=rows,
        groups=rows,
    )


def node_step_input(g: Graph, composite, rng, tset, mask="train", targets=None, dtype=torch.float32, source=None):
    """Transform the whole graph once; supervise the ``mask`` nodes that survive."""
    gt = apply(g, composite, rng, targets=targets)
    sel = np.flatnonzero(gt.mask(mask))
    ids = gt.orig_ids if gt.orig_ids is not None else np.arange(gt.num_nodes)
    mix = torch.as_tensor(tset.mixture_label(composite), dtype=dtype).expand(len(sel), -1)
    return StepInput(
        transformed=collate([gt], dtype),
        source=source if source is not None else collate([g], dtype),
        y=torch.from_numpy(gt.node_labels[sel]),
        mix=mix,
        rows_t=torch.as_tensor(sel, dtype=torch.long),
        rows_s=torch.as_tensor(ids[sel], dtype=torch.long),
        groups=torch.zeros(len(sel), dtype=torch.long),
    )


def _model_dtype(model):
    return next(model.parameters()).dtype


@torch.no_grad()
def predict_logits(model, data, dtype=None, chunk=256) -> torch.Tensor:
    """Logits for a list of graphs (one row each) or a node-level graph (one row per node)."""
    dtype = dtype or _model_dtype(model)
    was_training = model.training
    model.eval()
    try:
        if isinstance(data, Graph):
            return model(collate([data], dtype))[0]
        out = [model(collate(list(data[i : i + chunk]), dtype))[0] for i in range(0, len(data), chunk)]
        return torch.cat(out)
    finally:
        model.train(was_training)


def accuracy(model, split: DatasetSplit, part: str) -> float:
    if split.task_kind == "graph":
        graphs = getattr(split, part)
        if not graphs:
            return float("nan")
        pred = predict_logits(model, graphs).argmax(-1).numpy()
        y = np.array([g.graph_label for g in graphs])
        return float((pred == y).mean())
    g = split.graph
    m = g.mask(part)
    pred = predict_logits(model, g).argmax(-1).numpy()
    return float((pred[m] == g.node_labels[m]).mean())


def _check_split(split: DatasetSplit):
    if split.task_kind == "graph":
        if not split.train or not split.val:
            raise ValueError("training needs non-empty train and val splits")
    elif split.graph is None or not split.graph.mask("train").any():
        raise ValueError("training needs labelled train nodes")


def _steps(split, cfg, order_rng):
    if split.task_kind == "graph":
        perm = order_rng.permutation(len(split.train))
        return [perm[i : i + cfg.batch_size] for i in range(0, len(perm), cfg.batch_size)]
    return [None] * cfg.steps_per_epoch


def train(method, model, split: DatasetSplit, cfg: TrainConfig, tset: Optional[TransformSet] = None):
    """Fit ``model`` and return ``(model, history)``.

    The returned model carries the parameters of the epoch with the best
    accuracy on the untransformed validation split. ``history`` holds one
    dict per epoch.
    """
    method = method or cfg.method
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    if method == "graphmetro" and not isinstance(model, MoEModel):
        raise TypeError("graphmetro training needs a MoEModel")
    _check_split(split)
    tset = tset if tset is not None else TransformSet(())
    dtype = _model_dtype(model)
    torch.manual_seed(cfg.seed)
    order_rng = np.random.default_rng(cfg.seed)
    optim = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)

    node_source = collate([split.graph], dtype) if split.task_kind == "node" else None
    train_nodes = np.flatnonzero(split.graph.mask("train")) if split.task_kind == "node" else None

    history = []
    best_val, best_state = -1.0, None
    bad_steps = 0
    for epoch in range(cfg.epochs):
        model.train()
        totals = []
        for step_no, idx in enumerate(_steps(split, cfg, order_rng)):
            if split.task_kind == "graph":
                graphs = [split.train[i] for i in idx]
                rngs = [instance_rng(cfg.seed, epoch, step_no, j) for j in range(len(graphs))]
                if method == "erm":
                    comps = [IDENTITY] * len(graphs)
                else:
                    comps = [draw_training_transform(tset, cfg.k, r, cfg.identity_prob) for r in rngs]
                step = graph_step_input(graphs, comps, rngs, tset, dtype)
            else:
                rng = instance_rng(cfg.seed, epoch, step_no, 0)
                comp = IDENTITY
                if method != "erm":
                    comp = draw_training_transform(tset, cfg.k, rng, cfg.identity_prob)
                n_t = min(cfg.subgraph_targets, len(train_nodes))
                targets = np.sort(rng.choice(train_nodes, size=n_t, replace=False))
                step = node_step_input(split.graph, comp, rng, tset, "train", targets, dtype, node_source)
                if len(step.y) == 0:
                    continue

            if method == "graphmetro":
                losses = total_objective(model, step, cfg.lam)
            else:
                losses = erm_objective(model, step)
            if not torch.isfinite(losses.total):
                bad_steps += 1
                if bad_steps >= cfg.max_bad_steps:
                    raise TrainingDivergedError(
                        f"non-finite loss for {bad_steps} consecutive steps at epoch {epoch}: "
                        f"{losses.as_dict()}"
                    )
                continue
            bad_steps = 0
            optim.zero_grad()
            losses.total.backward()
            optim.step()
            totals.append(losses.as_dict())

        row = {"epoch": epoch}
        for key in ("l1", "l2_task", "l2_align", "total"):
            row[key] = float(np.mean([t[key] for t in totals])) if totals else float("nan")
        row["train_acc"] = accuracy(model, split, "train")
        row["val_acc"] = accuracy(model, split, "val")
        history.append(row)
        logger.debug("epoch %d %s", epoch, row)
        if row["val_acc"] > best_val:
            best_val = row["val_acc"]
            best_state = copy.deepcopy(model.state_dict())

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return model, history


HISTORY_COLUMNS = ("epoch", "l1", "l2_task", "l2_align", "total", "train_acc", "val_acc")


def loss_reconstruction_ok(losses: LossBreakdown, tol=1e-6) -> bool:
    recon = losses.l1_gating + losses.l2_task + losses.lam * losses.l2_align
    return abs(float(recon) - float(losses.total)) <= tol
