"""Training objective: gate BCE, task CE and reference alignment."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .model import MoEModel
from .nn import GraphBatch


@dataclass
class LossBreakdown:
    """Scalar loss terms; ``total = l1_gating + l2_task + lam * l2_align``."""

    l1_gating: torch.Tensor
    l2_task: torch.Tensor
    l2_align: torch.Tensor
    total: torch.Tensor
    lam: float = 1.0

    def as_dict(self) -> dict:
        return {
            "l1": float(self.l1_gating.detach()),
            "l2_task": float(self.l2_task.detach()),
            "l2_align": float(self.l2_align.detach()),
            "total": float(self.total.detach()),
        }


def gating_loss(w: torch.Tensor, bits: torch.Tensor) -> torch.Tensor:
    """Mean element-wise binary cross entropy of ``sigmoid(w)`` against ``bits``."""
    bits = torch.as_tensor(bits, dtype=w.dtype)
    if w.shape != bits.shape:
        bits = bits.expand_as(w)
    return F.binary_cross_entropy_with_logits(w, bits)


def alignment_distance(z_a: torch.Tensor, z_b: torch.Tensor) -> torch.Tensor:
    """``sqrt(sum((z_a - z_b)**2)) / n`` with ``n`` the number of rows."""
    if z_a.shape != z_b.shape:
        raise ValueError(f"shape mismatch {tuple(z_a.shape)} vs {tuple(z_b.shape)}")
    if z_a.dim() == 1:
        z_a, z_b = z_a.unsqueeze(0), z_b.unsqueeze(0)
    n = z_a.shape[0]
    sq = ((z_a - z_b) ** 2).sum()
    # sqrt has an infinite derivative at 0; route exact zeros around it
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, torch.sqrt(safe), torch.zeros_like(sq)) / n


def grouped_alignment(h: torch.Tensor, target: torch.Tensor, groups: torch.Tensor) -> torch.Tensor:
    """Mean over groups of :func:`alignment_distance` restricted to each group's rows."""
    num = int(groups.max()) + 1
    sq = h.new_zeros(num).index_add_(0, groups, ((h - target) ** 2).sum(-1))
    n = torch.bincount(groups, minlength=num).to(h.dtype)
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    d = torch.where(sq > 0, torch.sqrt(safe), torch.zeros_like(sq)) / n
    return d.mean()


@dataclass
class StepInput:
    """One optimisation step's worth of data.

    ``rows_t`` picks the supervised rows from outputs on ``transformed``
    (graphs, or labelled nodes) and ``rows_s`` the matching rows from outputs
    on ``source``. ``groups`` assigns those rows to instances for the
    alignment distance.
    """

    transformed: GraphBatch
    source: GraphBatch
    y: torch.Tensor
    mix: torch.Tensor
    rows_t: torch.Tensor
    rows_s: torch.Tensor
    groups: torch.Tensor


def total_objective(
    model: MoEModel,
    step: StepInput,
    lam: float = 1.0,
    gate_scores: Optional[torch.Tensor] = None,
    anchor: Optional[torch.Tensor] = None,
    frozen_reference: Optional[torch.Tensor] = None,
) -> LossBreakdown:
    """Gate BCE on the transformed instance plus task CE and ``lam``-weighted
    alignment of the aggregated representation to the reference expert's
    output on the untransformed source.

    The aggregation uses detached gate scores and the reference output is a
    detached target. The alignment term sends no gradient into the reference
    expert at all: its row inside the aggregate is detached there too, so only
    the task loss trains it. ``gate_scores``, ``anchor`` and
    ``frozen_reference`` (the reference rows on the transformed input)
    substitute those frozen values explicitly, which lets finite-difference
    checks hold them fixed.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    w = model.gate_forward(step.transformed)[step.rows_t]
    Z = model.experts_forward(step.transformed)[step.rows_t]
    l1 = gating_loss(w, step.mix)
    frozen_w = w.detach() if gate_scores is None else gate_scores
    h = model.aggregate(frozen_w, Z)
    l2_task = F.cross_entropy(model.classify(h), step.y)
    if anchor is None:
        with torch.no_grad():
            anchor = model.reference_forward(step.source)[step.rows_s]
    ref_t = Z[:, 0].detach() if frozen_reference is None else frozen_reference
    h_align = model.aggregate(frozen_w, torch.cat([ref_t.unsqueeze(1), Z[:, 1:]], dim=1))
    l2_align = grouped_alignment(h_align, anchor, step.groups)
    total = l1 + l2_task + lam * l2_align
    return LossBreakdown(l1, l2_task, l2_align, total, lam)


def erm_objective(model, step: StepInput) -> LossBreakdown:
    logits, _, _, _ = model(step.transformed)
    ce = F.cross_entropy(logits[step.rows_t], step.y)
    zero = ce.new_zeros(())
    return LossBreakdown(zero, ce, zero, ce, 0.0)
