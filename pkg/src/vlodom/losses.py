"""Supervised pose loss with learnable uncertainty weights."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np

from .geometry import Pose
from .layers import branch

DEFAULT_ALPHA = (1.6, 0.8, 0.4, 0.2)


@dataclass
class LossWeights:
    """Per-level weights (finest level first) and the learnable scales."""

    alpha_l: Tuple[float, ...] = DEFAULT_ALPHA
    k_x: float = 0.0
    k_q: float = -2.5

    def __post_init__(self):
        a = np.asarray(self.alpha_l, dtype=np.float64)
        if not np.all(np.isfinite(a)) or np.any(a < 0):
            raise ValueError("alpha_l must be finite and non-negative")


def _align(q: np.ndarray, q_gt: np.ndarray):
    s = -1.0 if branch(np.dot(q, q_gt) < 0) else 1.0
    return s * q, s


def layer_loss(pred: Pose, gt: Pose, k_x: float, k_q: float) -> float:
    """``|t_gt - t|_1 e^-k_x + k_x + |q_gt - q|_2 e^-k_q + k_q``.

    ``q`` is first sign-aligned with ``q_gt`` so that ``q`` and ``-q`` give
    the same loss.
    """
    return layer_loss_forward(pred.q, pred.t, gt, k_x, k_q)[0]


def layer_loss_forward(q, t, gt: Pose, k_x: float, k_q: float):
    q_al, s = _align(np.asarray(q, float), gt.q)
    rt = gt.t - np.asarray(t, float)
    rq = gt.q - q_al
    sgn = np.where(branch(rt >= 0), 1.0, -1.0)
    lt = float(np.sum(sgn * rt))
    lq = float(np.linalg.norm(rq))
    ex, eq = np.exp(-k_x), np.exp(-k_q)
    loss = lt * ex + k_x + lq * eq + k_q
    return loss, (sgn, rq, lt, lq, ex, eq, s)


def layer_loss_backward(cache, dloss: float = 1.0):
    """Returns (dq, dt, dk_x, dk_q)."""
    sgn, rq, lt, lq, ex, eq, s = cache
    dt = -sgn * ex * dloss
    dq = (-s * rq / lq * eq * dloss) if lq > 0 else np.zeros(4)
    return dq, dt, (1.0 - lt * ex) * dloss, (1.0 - lq * eq) * dloss


def total_loss(per_level_losses: Sequence[float], weights: LossWeights | Sequence[float] = DEFAULT_ALPHA) -> float:
    """Weighted sum over levels (finest first)."""
    alpha = weights.alpha_l if isinstance(weights, LossWeights) else weights
    losses = np.asarray(per_level_losses, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if losses.shape != alpha.shape:
        raise ValueError(f"expected {len(alpha)} level losses, got {len(losses)}")
    return float(np.sum(alpha * losses))
