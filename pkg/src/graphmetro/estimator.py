"""scikit-learn style estimators.

``X`` is either a list of :class:`~graphmetro.graph.Graph` (graph
classification) or a single node-labelled ``Graph`` (node classification,
whose ``train``/``val`` masks drive fitting). Predictions come back as one
row per graph, or one row per node.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .graph import DatasetSplit, Graph, split_dataset, validate_graph
from .model import MoEConfig, MoEModel, SingleEncoderModel
from .nn import collate
from .training import TrainConfig, train
from .transforms import DEFAULT_KINDS, TransformSet

DTYPES = {"float32": torch.float32, "float64": torch.float64}


def check_graphs(X, require_labels=False):
    """Validate estimator input; returns ``("node", graph)`` or ``("graph", list)``."""
    if isinstance(X, Graph):
        graphs, kind = [X], "node"
    else:
        graphs, kind = list(X), "graph"
        if not graphs:
            raise ValueError("empty input")
        if not all(isinstance(g, Graph) for g in graphs):
            raise TypeError("expected a Graph or a sequence of Graph objects")
    for i, g in enumerate(graphs):
        problems = validate_graph(g)
        if problems:
            raise ValueError(f"graph {i} is invalid: {'; '.join(problems)}")
    if kind == "graph":
        dims = {g.num_node_features for g in graphs}
        if len(dims) != 1:
            raise ValueError(f"inconsistent node feature dimensions {sorted(dims)}")
        if require_labels and any(g.graph_label is None for g in graphs):
            raise ValueError("graph labels missing")
    elif X.node_labels is None:
        raise ValueError("node-level input needs node labels")
    return kind, (X if kind == "node" else graphs)


class _BaseGraphClassifier(ClassifierMixin, BaseEstimator):
    _method = None

    def _transform_set(self) -> TransformSet:
        kinds = () if self.kinds is None else tuple(self.kinds)
        return TransformSet.from_kinds(kinds, self.param_domains)

    def _config(self, data_kind, in_dim, edge_dim, num_classes, K) -> MoEConfig:
        return MoEConfig(
            K=K,
            in_dim=in_dim,
            num_classes=num_classes,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            edge_dim=edge_dim,
            activation=self.activation,
            dropout=self.dropout,
            pooling=self.pooling,
            expert_mode=getattr(self, "expert_mode", "independent_encoders"),
            aggregation_mode=getattr(self, "aggregation_mode", "softmax_sum"),
            task_kind=data_kind,
            gate_degree=getattr(self, "gate_degree", True),
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            method=self._method_name(),
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            lam=getattr(self, "lam", 0.0),
            k=self.k,
            seed=self.random_state,
            identity_prob=self.identity_prob,
            steps_per_epoch=self.steps_per_epoch,
            subgraph_targets=self.subgraph_targets,
        )

    def _method_name(self):
        return self._method

    def _build(self, config):
        raise NotImplementedError

    def fit(self, X, y=None):
        """Fit on graphs ``X`` with labels ``y`` (graph labels by default);
        ``validation_fraction`` of them is held out for model selection.
        A node-level ``X`` uses its own masks and node labels."""
        kind, data = check_graphs(X, require_labels=y is None and not isinstance(X, Graph))
        if kind == "graph":
            labels = np.array([g.graph_label for g in data] if y is None else y)
            if len(labels) != len(data):
                raise ValueError("X and y have different lengths")
            self.classes_, enc = np.unique(labels, return_inverse=True)
            data = [g.replace(graph_label=int(c)) for g, c in zip(data, enc)]
            val_n = max(1, int(round(self.validation_fraction * len(data))))
            perm = np.random.default_rng(self.random_state).permutation(len(data))
            split = DatasetSplit(
                "graph",
                [data[i] for i in perm[val_n:]],
                [data[i] for i in perm[:val_n]],
                [],
                num_classes=len(self.classes_),
            )
        else:
            if not data.mask("train").any() or not data.mask("val").any():
                data = split_dataset(data, (0.8, 0.1, 0.1), self.random_state).graph
            self.classes_ = np.arange(int(data.node_labels.max()) + 1)
            split = DatasetSplit(
                "node",
                np.flatnonzero(data.mask("train")),
                np.flatnonzero(data.mask("val")),
                np.flatnonzero(data.mask("test")),
                graph=data,
                num_classes=len(self.classes_),
            )
        return self.fit_split(split)

    def fit_split(self, split: DatasetSplit):
        """Fit on a prepared :class:`DatasetSplit` (labels already 0..C-1)."""
        tset = self._transform_set()
        first = split.graph if split.task_kind == "node" else split.train[0]
        if not hasattr(self, "classes_") or len(self.classes_) != split.num_classes:
            self.classes_ = np.arange(split.num_classes)
        config = self._config(
            split.task_kind, first.num_node_features, first.num_edge_features, split.num_classes, tset.K
        )
        torch.manual_seed(self.random_state)
        module = self._build(config).to(DTYPES[self.dtype])
        self.module_, self.history_ = train(
            self._method_name(), module, split, self._train_config(), tset
        )
        self.transform_set_ = tset
        self.task_kind_ = split.task_kind
        self.n_features_in_ = first.num_node_features
        return self

    @torch.no_grad()
    def _forward(self, X):
        check_is_fitted(self, "module_")
        kind, data = check_graphs(X)
        if kind != self.task_kind_:
            raise ValueError(f"estimator was fitted on a {self.task_kind_}-level task")
        graphs = [data] if kind == "node" else data
        if graphs[0].num_node_features != self.n_features_in_:
            raise ValueError(
                f"X has {graphs[0].num_node_features} node features, expected {self.n_features_in_}"
            )
        self.module_.eval()
        return self.module_(collate(graphs, DTYPES[self.dtype]))

    def decision_function(self, X) -> np.ndarray:
        return self._forward(X)[0].numpy()

    def predict_proba(self, X) -> np.ndarray:
        return torch.softmax(self._forward(X)[0], -1).numpy()

    def predict(self, X) -> np.ndarray:
        scores = self.decision_function(X)
        return self.classes_[scores.argmax(-1)]

    def transform(self, X) -> np.ndarray:
        """Final representations fed to the classifier."""
        return self._forward(X)[3].numpy()

    def score(self, X, y=None, sample_weight=None):
        kind, data = check_graphs(X)
        if y is None:
            if kind == "node":
                m = data.mask("test") if data.node_masks else np.ones(data.num_nodes, bool)
                return float((self.predict(data)[m] == data.node_labels[m]).mean())
            y = [g.graph_label for g in data]
        return super().score(X, y, sample_weight)


class GraphMETROClassifier(TransformerMixin, _BaseGraphClassifier):
    """Mixture of aligned experts trained on transform-extrapolated data.

    Parameters
    ----------
    kinds : sequence of str
        Active transform kinds; kind ``i`` (1-based) is mixture component ``i``.
    param_domains : dict, optional
        Per-kind ``(low, high)`` strength domains overriding the defaults.
    k : int
        Maximum number of kinds composed per training instance.
    lam : float
        Weight of the alignment term.
    expert_mode : {"independent_encoders", "shared_encoder_with_heads"}
    aggregation_mode : {"softmax_sum", "argmax_select"}
    gate_degree : bool
        Give the gate each node's log in-degree as an extra input, so
        structural transforms are visible to it.
    identity_prob : float, optional
        Chance that a training instance stays untransformed; ``1/(K+1)`` by default.
    """

    _method = "graphmetro"

    def __init__(
        self,
        kinds: Sequence[str] = tuple(str(k) for k in DEFAULT_KINDS),
        param_domains: Optional[dict] = None,
        k: int = 2,
        hidden_dim: int = 64,
        num_layers: int = 3,
        activation: str = "prelu",
        dropout: float = 0.0,
        pooling: str = "add",
        expert_mode: str = "independent_encoders",
        aggregation_mode: str = "softmax_sum",
        gate_degree: bool = True,
        lam: float = 1.0,
        learning_rate: float = 1e-3,
        epochs: int = 100,
        batch_size: int = 32,
        identity_prob: Optional[float] = None,
        steps_per_epoch: int = 1,
        subgraph_targets: int = 128,
        validation_fraction: float = 0.1,
        dtype: str = "float32",
        random_state: int = 0,
    ):
        self.kinds = kinds
        self.param_domains = param_domains
        self.k = k
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.activation = activation
        self.dropout = dropout
        self.pooling = pooling
        self.expert_mode = expert_mode
        self.aggregation_mode = aggregation_mode
        self.gate_degree = gate_degree
        self.lam = lam
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.identity_prob = identity_prob
        self.steps_per_epoch = steps_per_epoch
        self.subgraph_targets = subgraph_targets
        self.validation_fraction = validation_fraction
        self.dtype = dtype
        self.random_state = random_state

    def _build(self, config):
        return MoEModel(config)

    def gate_proba(self, X) -> np.ndarray:
        """Sigmoid gate output per component, one row per graph (or node)."""
        return torch.sigmoid(self._forward(X)[1]).numpy()

    def expert_outputs(self, X) -> np.ndarray:
        """Expert representations, shape (instances, K+1, hidden_dim)."""
        return self._forward(X)[2].numpy()


class ERMClassifier(_BaseGraphClassifier):
    """Single-encoder baseline; ``augment=True`` trains on transformed
    instances drawn like GraphMETRO's (ERM-Aug)."""

    def __init__(
        self,
        augment: bool = False,
        kinds: Sequence[str] = tuple(str(k) for k in DEFAULT_KINDS),
        param_domains: Optional[dict] = None,
        k: int = 2,
        hidden_dim: int = 64,
        num_layers: int = 3,
        activation: str = "prelu",
        dropout: float = 0.0,
        pooling: str = "add",
        learning_rate: float = 1e-3,
        epochs: int = 100,
        batch_size: int = 32,
        identity_prob: Optional[float] = None,
        steps_per_epoch: int = 1,
        subgraph_targets: int = 128,
        validation_fraction: float = 0.1,
        dtype: str = "float32",
        random_state: int = 0,
    ):
        self.augment = augment
        self.kinds = kinds
        self.param_domains = param_domains
        self.k = k
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.activation = activation
        self.dropout = dropout
        self.pooling = pooling
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.identity_prob = identity_prob
        self.steps_per_epoch = steps_per_epoch
        self.subgraph_targets = subgraph_targets
        self.validation_fraction = validation_fraction
        self.dtype = dtype
        self.random_state = random_state

    def _method_name(self):
        return "erm_aug" if self.augment else "erm"

    def _build(self, config):
        return SingleEncoderModel(config)
