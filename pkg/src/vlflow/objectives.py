"""Pre-training losses and the IPOT optimal-transport solver."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from ._backend import kernels
from .masking import MaskPlan
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0      # ITM (+ weighted VLA)
    lambda2: float = 0.01     # MFR
    vla_weight: float = 0.1

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.vla_weight) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class IpotConfig:
    beta: float = 0.5
    outer_iterations: int = 50
    inner_iterations: int = 1

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("IPOT beta must be positive")
        if self.outer_iterations < 1 or self.inner_iterations < 1:
            raise ValueError("IPOT iteration counts must be >= 1")


def mlm_loss(logits: Tensor, targets: Sequence[int], plan: MaskPlan) -> Tensor:
    """Mean NLL over the plan's positions.

    ``logits`` holds one row per masked position, in plan order; ``targets``
    is the full original caption.
    """
    if not len(plan):
        raise ValueError("MLM plan is empty; skip the term instead")
    if logits.shape[0] != len(plan):
        raise ValueError("need one logit row per masked position")
    gold = [int(targets[p]) for p in plan.positions]
    logp = T.log_softmax_rows(logits)
    return T.scale(T.total(T.take_elements(logp, range(len(gold)), gold)), -1.0 / len(gold))


def itm_loss(logits: Tensor, label: int) -> Tensor:
    """Binary NLL; ``logits`` is 1 x 2 (column 0 = mismatch, 1 = match)."""
    if label not in (0, 1):
        raise ValueError("ITM label must be 0 (mismatch) or 1 (match)")
    logp = T.log_softmax_rows(logits)
    return T.scale(T.total(T.take_elements(logp, [0], [label])), -1.0)


def ipot_distance(cost, mu, nu, cfg: IpotConfig = IpotConfig()) -> tuple[float, np.ndarray]:
    """Inexact proximal-point OT: returns (<plan, cost>, plan)."""
    cost = np.asarray(cost, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    nu = np.asarray(nu, dtype=np.float64)
    if cost.ndim != 2 or cost.shape != (mu.size, nu.size):
        raise ValueError(f"cost shape {cost.shape} does not match marginals ({mu.size}, {nu.size})")
    if (mu < 0).any() or (nu < 0).any():
        raise ValueError("marginals must be non-negative")
    if abs(mu.sum() - 1.0) > 1e-9 or abs(nu.sum() - 1.0) > 1e-9:
        raise ValueError("marginals must each sum to 1")
    if (cost < 0).any():
        raise ValueError("costs must be non-negative")
    plan = kernels.ipot_plan(cost, mu, nu, cfg.beta, cfg.outer_iterations, cfg.inner_iterations)
    return float((plan * cost).sum()), plan


def cosine_cost(a: Tensor, b: Tensor) -> Tensor:
    """1 - cosine similarity between every row of ``a`` and every row of ``b``."""
    sim = T.normalize_rows(a) @ T.transpose(T.normalize_rows(b))
    ones = Tensor(np.ones(sim.shape))
    return ones - sim


def vla_loss(visual: Tensor, language: Tensor, cfg: IpotConfig = IpotConfig(),
             plan: np.ndarray | None = None) -> tuple[Tensor, np.ndarray]:
    """OT distance between token sets under cosine cost, uniform marginals.

    The transport plan is a constant for differentiation.  Passing ``plan``
    reuses a frozen plan instead of solving again.
    """
    cost = cosine_cost(visual, language)
    if plan is None:
        m, t = cost.shape
        # clip tiny negative round-off from 1 - cos
        _, plan = ipot_distance(np.maximum(cost.data, 0.0), np.full(m, 1.0 / m),
                                np.full(t, 1.0 / t), cfg)
    return T.total(T.mul(cost, Tensor(plan))), plan


def mfr_loss(targets: Tensor, regressed: Tensor) -> Tensor:
    """Sum over masked tokens of squared L2 distance; ``targets`` carry no gradient."""
    if targets.shape != regressed.shape:
        raise T.ShapeError(f"mfr_loss: {targets.shape} vs {regressed.shape}")
    return T.total(T.square(regressed - targets.detach()))


def total_loss(mlm: Tensor | float, itm: Tensor | float, mfr: Tensor | float,
               weights: LossWeights = LossWeights()) -> Tensor:
    """MLM + lambda1 * ITM + lambda2 * MFR (ITM already carries the weighted VLA term)."""
    parts = [p if isinstance(p, Tensor) else Tensor(p) for p in (mlm, itm, mfr)]
    out = parts[0]
    if weights.lambda1:
        out = out + T.scale(parts[1], weights.lambda1)
    if weights.lambda2:
        out = out + T.scale(parts[2], weights.lambda2)
    return out
