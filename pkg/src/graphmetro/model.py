"""Mixture-of-aligned-experts network and the single-encoder baseline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from .nn import MLP, GNNEncoder, GraphBatch

CHECKPOINT_VERSION = 1

EXPERT_MODES = ("independent_encoders", "shared_encoder_with_heads")
AGGREGATION_MODES = ("softmax_sum", "argmax_select")


@dataclass
class MoEConfig:
    K: int
    in_dim: int
    num_classes: int
    hidden_dim: int = 64
    num_layers: int = 3
    edge_dim: int = 0
    activation: str = "prelu"
    dropout: float = 0.0
    pooling: str = "add"
    expert_mode: str = "independent_encoders"
    aggregation_mode: str = "softmax_sum"
    task_kind: str = "graph"
    # feed the gate log(1 + in-degree) of the graph it sees as an extra input column
    gate_degree: bool = True

    def __post_init__(self):
        if self.K < 0:
            raise ValueError("K must be >= 0")
        if self.hidden_dim < 1 or self.in_dim < 1:
            raise ValueError("dimensions must be >= 1")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.expert_mode not in EXPERT_MODES:
            raise ValueError(f"expert_mode must be one of {EXPERT_MODES}")
        if self.aggregation_mode not in AGGREGATION_MODES:
            raise ValueError(f"aggregation_mode must be one of {AGGREGATION_MODES}")
        if self.task_kind not in ("node", "graph"):
            raise ValueError("task_kind must be 'node' or 'graph'")

    def encoder(self, extra_in: int = 0) -> GNNEncoder:
        return GNNEncoder(
            self.in_dim + extra_in,
            self.hidden_dim,
            self.num_layers,
            self.edge_dim,
            self.activation,
            self.dropout,
            pooling=self.pooling if self.task_kind == "graph" else None,
        )


def aggregate(w: torch.Tensor, Z: torch.Tensor, mode: str = "softmax_sum") -> torch.Tensor:
    """Combine expert rows ``Z[..., i, :]`` with gate scores ``w[..., i]``.

    ``softmax_sum`` returns ``softmax(w) @ Z``; ``argmax_select`` returns the
    row with the largest score, ties going to the lowest index.
    """
    if w.shape != Z.shape[:-1]:
        raise ValueError(f"gate scores {tuple(w.shape)} do not match experts {tuple(Z.shape)}")
    if mode == "softmax_sum":
        return (torch.softmax(w, dim=-1).unsqueeze(-1) * Z).sum(dim=-2)
    if mode == "argmax_select":
        # torch.argmax returns the first maximal index
        idx = torch.argmax(w, dim=-1, keepdim=True)
        return torch.take_along_dim(Z, idx.unsqueeze(-1), dim=-2).squeeze(-2)
    raise ValueError(f"unknown aggregation mode {mode!r}")


class MoEModel(nn.Module):
    """Gate, K+1 experts (expert 0 is the reference) and a classifier."""

    def __init__(self, config: MoEConfig):
        super().__init__()
        self.config = config
        c = config
        self.gate_encoder = c.encoder(extra_in=int(c.gate_degree))
        self.gate_head = nn.Linear(c.hidden_dim, c.K + 1)
        if c.expert_mode == "independent_encoders":
            self.experts = nn.ModuleList(c.encoder() for _ in range(c.K + 1))
            self.shared_encoder = None
            self.heads = None
        else:
            self.experts = None
            self.shared_encoder = c.encoder()
            self.heads = nn.ModuleList(
                MLP(c.hidden_dim, c.hidden_dim, c.hidden_dim, c.activation) for _ in range(c.K + 1)
            )
        self.classifier = MLP(c.hidden_dim, c.hidden_dim, c.num_classes, c.activation)

    @property
    def num_components(self) -> int:
        return self.config.K + 1

    def gating_parameters(self):
        return list(self.gate_encoder.parameters()) + list(self.gate_head.parameters())

    def gate_forward(self, data: GraphBatch) -> torch.Tensor:
        """Pre-sigmoid component scores, one row per graph (or per node)."""
        self._check(data)
        if self.config.gate_degree:
            deg = torch.bincount(data.edge_index[1], minlength=data.num_nodes).to(data.x.dtype)
            data = replace(data, x=torch.cat([data.x, torch.log1p(deg).unsqueeze(1)], dim=1))
        return self.gate_head(self.gate_encoder(data))

    def experts_forward(self, data: GraphBatch, which=None) -> torch.Tensor:
        """Expert representations stacked as (instances, K+1, hidden)."""
        self._check(data)
        which = range(self.num_components) if which is None else which
        if self.experts is not None:
            return torch.stack([self.experts[i](data) for i in which], dim=-2)
        shared = self.shared_encoder(data)
        return torch.stack([self.heads[i](shared) for i in which], dim=-2)

    def reference_forward(self, data: GraphBatch) -> torch.Tensor:
        """Output of the reference expert alone."""
        return self.experts_forward(data, which=[0])[..., 0, :]

    def aggregate(self, w, Z):
        return aggregate(w, Z, self.config.aggregation_mode)

    def classify(self, h: torch.Tensor) -> torch.Tensor:
        return self.classifier(h)

    def forward(self, data: GraphBatch, detach_gate: bool = False):
        """Return ``(logits, w, Z, h)``.

        With ``detach_gate`` the aggregation sees gate scores cut from the
        graph, so losses on ``h`` send no gradient into the gate.
        """
        w = self.gate_forward(data)
        Z = self.experts_forward(data)
        h = self.aggregate(w.detach() if detach_gate else w, Z)
        return self.classify(h), w, Z, h

    def _check(self, data: GraphBatch):
        if data.x.shape[1] != self.config.in_dim:
            raise ValueError(
                f"node feature dimension {data.x.shape[1]} != configured {self.config.in_dim}"
            )
        edim = 0 if data.edge_attr is None else data.edge_attr.shape[1]
        if edim != self.config.edge_dim:
            raise ValueError(f"edge feature dimension {edim} != configured {self.config.edge_dim}")


class SingleEncoderModel(nn.Module):
    """One encoder and a classifier: the ERM / ERM-Aug network."""

    def __init__(self, config: MoEConfig):
        super().__init__()
        self.config = config
        self.encoder = config.encoder()
        self.classifier = MLP(config.hidden_dim, config.hidden_dim, config.num_classes, config.activation)

    def forward(self, data: GraphBatch, detach_gate: bool = False):
        h = self.encoder(data)
        return self.classifier(h), None, None, h


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: nn.Module, index_map, extra: Optional[dict] = None):
    """Persist config, parameters and the component index map."""
    kind = "moe" if isinstance(model, MoEModel) else "single"
    payload = {
        "version": CHECKPOINT_VERSION,
        "model_kind": kind,
        "config": dataclasses.asdict(model.config),
        "index_map": list(index_map),
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path, expected_index_map=None):
    """Return ``(model, payload)``; refuses a checkpoint whose component index
    map differs from ``expected_index_map``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')!r}")
    if expected_index_map is not None and list(expected_index_map) != payload["index_map"]:
        raise CheckpointError(
            f"component index map mismatch: checkpoint {payload['index_map']} "
            f"vs expected {list(expected_index_map)}"
        )
    config = MoEConfig(**payload["config"])
    cls = MoEModel if payload["model_kind"] == "moe" else SingleEncoderModel
    model = cls(config)
    first = next(iter(payload["state_dict"].values()))
    model.to(first.dtype)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload

