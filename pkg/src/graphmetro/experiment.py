"""Config-driven pipeline steps shared by the command line and the test suite."""

from __future__ import annotations

import logging

import numpy as np

from .config import ExperimentConfig
from .estimator import ERMClassifier, GraphMETROClassifier
from .evaluation import discover_shifts, evaluate_environments, invariance_matrix
from .graph import DatasetSplit, Graph, split_dataset
from .io import read_graph
from .synthetic import generate_synthetic
from .training import instance_rng
from .transforms import apply_many, apply

logger = logging.getLogger(__name__)

# child-seed namespace for the discovery target, apart from environment ids
DISCOVER_STREAM = 10_000


def load_dataset(cfg: ExperimentConfig):
    if cfg.dataset_path is not None:
        return read_graph(cfg.dataset_path)
    return generate_synthetic(cfg.synthetic_spec())


def make_split(cfg: ExperimentConfig, data, seed: int) -> DatasetSplit:
    """Split by ``seed``; a node dataset that ships all three masks keeps them."""
    if isinstance(data, Graph) and data.node_masks and all(
        data.mask(m).any() for m in ("train", "val", "test")
    ):
        g = data
        return DatasetSplit(
            "node",
            np.flatnonzero(g.mask("train")),
            np.flatnonzero(g.mask("val")),
            np.flatnonzero(g.mask("test")),
            graph=g,
            num_classes=int(g.node_labels.max()) + 1,
        )
    return split_dataset(data, cfg.split, seed)


def make_estimator(cfg: ExperimentConfig, method: str, seed: int):
    m, t, tr = cfg.model, cfg.transforms, cfg.train
    common = dict(
        kinds=list(t.kinds),
        param_domains=t.param_domains or None,
        k=t.k,
        hidden_dim=m.hidden_dim,
        num_layers=m.num_layers,
        activation=m.activation,
        dropout=m.dropout,
        pooling=m.pooling,
        learning_rate=tr.learning_rate,
        epochs=tr.epochs,
        batch_size=tr.batch_size,
        identity_prob=tr.identity_prob,
        steps_per_epoch=tr.steps_per_epoch,
        subgraph_targets=tr.subgraph_targets,
        dtype=tr.dtype,
        random_state=seed,
    )
    if method == "graphmetro":
        return GraphMETROClassifier(
            expert_mode=m.expert_mode,
            aggregation_mode=m.aggregation_mode,
            gate_degree=m.gate_degree,
            lam=tr.lam,
            **common,
        )
    return ERMClassifier(augment=method == "erm_aug", **common)


def fit(cfg: ExperimentConfig, method: str, split: DatasetSplit, seed: int):
    logger.info("training %s (seed %d)", method, seed)
    return make_estimator(cfg, method, seed).fit_split(split)


def environment_results(cfg: ExperimentConfig, model, split: DatasetSplit, seed: int):
    return evaluate_environments(
        model, split, cfg.transform_set(), seeds=(seed,), metric=cfg.evaluation.metric, k=cfg.transforms.k
    )


def invariance_sample(cfg: ExperimentConfig, split: DatasetSplit):
    if split.task_kind == "node":
        return split.graph
    return list(split.test[: cfg.evaluation.invariance_samples])


def invariance(cfg: ExperimentConfig, model, split: DatasetSplit, seed: int):
    e = cfg.evaluation
    return invariance_matrix(
        model, invariance_sample(cfg, split), cfg.transform_set(), e.invariance_trials, seed, e.normalization
    )


def discovery_target(cfg: ExperimentConfig, split: DatasetSplit, seed: int, kinds=None):
    """The test split under the planted composite (unlabelled use only)."""
    tset = cfg.transform_set()
    kinds = cfg.evaluation.discover_target if kinds is None else kinds
    env = tset.composite(kinds)
    if split.task_kind == "node":
        g = split.graph
        return apply(g, env, instance_rng(seed, DISCOVER_STREAM, 0), targets=np.flatnonzero(g.mask("test")))
    n = len(split.test)
    rngs = [instance_rng(seed, DISCOVER_STREAM, i) for i in range(n)]
    return apply_many(split.test, [env] * n, rngs)


def discover(cfg: ExperimentConfig, model, split: DatasetSplit, seed: int):
    """Shift report on the planted target, with gate accuracy on held-out probes."""
    target = discovery_target(cfg, split, seed)
    probes = split.graph if split.task_kind == "node" else list(split.test)
    return discover_shifts(model, target, cfg.transform_set(), probes=probes, seed=seed)
