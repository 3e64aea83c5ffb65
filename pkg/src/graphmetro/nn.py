"""Message-passing building blocks in plain torch."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .graph import Graph


@dataclass
class GraphBatch:
    """Disjoint union of graphs as tensors; ``batch[i]`` is the graph of node ``i``."""

    x: torch.Tensor
    edge_index: torch.Tensor
    edge_attr: Optional[torch.Tensor]
    batch: torch.Tensor
    num_graphs: int

    @property
    def num_nodes(self) -> int:
        return self.x.shape[0]


def collate(graphs: Sequence[Graph], dtype=torch.float32) -> GraphBatch:
    if isinstance(graphs, Graph):
        graphs = [graphs]
    sizes = np.array([g.num_nodes for g in graphs])
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    x = np.concatenate([g.node_features for g in graphs])
    ei = np.concatenate([g.edge_index + o for g, o in zip(graphs, offsets)], axis=1)
    edge_attr = None
    if graphs[0].edge_features is not None:
        edge_attr = torch.as_tensor(np.concatenate([g.edge_features for g in graphs]), dtype=dtype)
    return GraphBatch(
        x=torch.as_tensor(x, dtype=dtype),
        edge_index=torch.as_tensor(ei, dtype=torch.long),
        edge_attr=edge_attr,
        batch=torch.as_tensor(np.repeat(np.arange(len(graphs)), sizes), dtype=torch.long),
        num_graphs=len(graphs),
    )


def make_activation(name: str, dim: int) -> nn.Module:
    name = name.lower()
    if name in ("prelu", "pelu"):
        return nn.PReLU(dim, init=0.25)
    if name == "relu":
        return nn.ReLU()
    if name == "elu":
        return nn.ELU()
    if name == "tanh":
        return nn.Tanh()
    raise ValueError(f"unknown activation {name!r}")


def global_pool(x: torch.Tensor, batch: torch.Tensor, num_graphs: int, mode: str = "add"):
    """Per-graph column sums (or means) of node rows.

    Each column is accumulated in ascending value order (scatter_add on CPU
    walks rows in order), so relabelling the nodes of a graph leaves the
    result bitwise unchanged.
    """
    if mode not in ("add", "mean"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    if x.shape[0] == 0:
        raise ValueError("cannot pool an empty node set")
    # ties hold equal values, so their relative order cannot change the sum
    cols = x.detach().cpu().numpy().T
    by_value = torch.from_numpy(np.ascontiguousarray(np.argsort(cols, axis=1).T)).to(x.device)
    out = x.new_zeros((num_graphs, x.shape[1])).scatter_add_(0, batch[by_value], x.gather(0, by_value))
    if mode == "mean":
        counts = torch.bincount(batch, minlength=num_graphs).clamp(min=1).to(x.dtype)
        out = out / counts.unsqueeze(1)
    return out


class GATLayer(nn.Module):
    """Single-head graph attention with self loops and optional edge features."""

    def __init__(self, in_dim, out_dim, edge_dim=0, negative_slope=0.2):
        super().__init__()
        self.lin = nn.Linear(in_dim, out_dim, bias=False)
        self.att_src = nn.Parameter(torch.empty(out_dim))
        self.att_dst = nn.Parameter(torch.empty(out_dim))
        self.lin_edge = nn.Linear(edge_dim, out_dim, bias=False) if edge_dim else None
        self.att_edge = nn.Parameter(torch.empty(out_dim)) if edge_dim else None
        self.bias = nn.Parameter(torch.zeros(out_dim))
        self.negative_slope = negative_slope
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.xavier_uniform_(self.lin.weight)
        bound = 1.0 / np.sqrt(self.att_src.numel())
        for a in (self.att_src, self.att_dst, self.att_edge):
            if a is not None:
                nn.init.uniform_(a, -bound, bound)
        if self.lin_edge is not None:
            nn.init.xavier_uniform_(self.lin_edge.weight)
        nn.init.zeros_(self.bias)

    def forward(self, x, edge_index, edge_attr=None):
        n = x.shape[0]
        loops = torch.arange(n, device=x.device)
        src = torch.cat([edge_index[0], loops])
        dst = torch.cat([edge_index[1], loops])
        h = self.lin(x)
        score = (h * self.att_src).sum(-1)[src] + (h * self.att_dst).sum(-1)[dst]
        if self.lin_edge is not None:
            if edge_attr is None:
                raise ValueError("layer expects edge features")
            loop_attr = edge_attr.new_zeros((n, edge_attr.shape[1]))
            ea = self.lin_edge(torch.cat([edge_attr, loop_attr]))
            score = score + (ea * self.att_edge).sum(-1)
        score = nn.functional.leaky_relu(score, self.negative_slope)
        # shift by the per-target max for a stable softmax; the shift cancels
        peak = score.new_full((n,), -torch.inf).scatter_reduce(
            0, dst, score.detach(), reduce="amax", include_self=True
        )
        e = torch.exp(score - peak[dst])
        denom = e.new_zeros(n).index_add_(0, dst, e)
        alpha = e / denom[dst]
        out = h.new_zeros(h.shape).index_add_(0, dst, alpha.unsqueeze(-1) * h[src])
        return out + self.bias


class GNNEncoder(nn.Module):
    """Stack of GAT layers; returns node representations, or pooled graph
    representations when ``pooling`` is set."""

    def __init__(
        self,
        in_dim,
        hidden_dim,
        num_layers=2,
        edge_dim=0,
        activation="prelu",
        dropout=0.0,
        pooling=None,
    ):
        super().__init__()
        if num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        dims = [in_dim] + [hidden_dim] * num_layers
        self.layers = nn.ModuleList(
            GATLayer(dims[i], dims[i + 1], edge_dim) for i in range(num_layers)
        )
        self.acts = nn.ModuleList(
            make_activation(activation, hidden_dim) for _ in range(num_layers - 1)
        )
        self.dropout = dropout
        self.pooling = pooling
        self.out_dim = hidden_dim

    def forward(self, data: GraphBatch):
        x = data.x
        for i, layer in enumerate(self.layers):
            x = layer(x, data.edge_index, data.edge_attr)
            if i < len(self.acts):
                x = self.acts[i](x)
                x = nn.functional.dropout(x, self.dropout, self.training)
        if self.pooling:
            x = global_pool(x, data.batch, data.num_graphs, self.pooling)
        return x


class MLP(nn.Module):
    def __init__(self, in_dim, hidden_dim, out_dim, activation="prelu"):
        super().__init__()
        self.fc1 = nn.Linear(in_dim, hidden_dim)
        self.act = make_activation(activation, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, out_dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))
