"""Adam trainer for overfitting a single synthetic pair."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np

from .config import PipelineConfig
from .geometry import Pose, quat_angle, quat_multiply, quat_inverse
from .layers import ParamStore
from .model import Frame, init_params, loss_and_grads
from .synth import SyntheticPair

log = logging.getLogger(__name__)


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: ParamStore, grads: Dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1**self.t
        c2 = 1 - self.beta2**self.t
        for name in sorted(grads):
            g = np.asarray(grads[name], dtype=np.float64)
            m = self.m.get(name, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(name, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    pose: Pose
    losses: List[float] = field(default_factory=list)
    params: Optional[ParamStore] = None

    def errors(self, gt: Pose):
        """(rotation error in degrees, translation error in meters)."""
        dq = quat_multiply(quat_inverse(gt.q), self.pose.q)
        return float(np.degrees(quat_angle(dq))), float(np.linalg.norm(self.pose.t - gt.t))


def pair_frames(pair: SyntheticPair):
    return (
        Frame(pair.source, pair.source_image, pair.camera),
        Frame(pair.target, pair.target_image, pair.camera),
    )


def micro_train(
    cfg: PipelineConfig,
    pair: SyntheticPair,
    steps: int = 500,
    learning_rate: Optional[float] = None,
    params: Optional[ParamStore] = None,
) -> TrainResult:
    """Overfit one pair. ``losses[i]`` is the loss before update ``i``; the
    last entry is the loss after the final update, so there are ``steps + 1``.
    Returns the finest-level pose after training.
    """
    lr = cfg.train.learning_rate if learning_rate is None else learning_rate
    store = params.copy() if params is not None else init_params(cfg)
    opt = Adam(lr, cfg.train.beta1, cfg.train.beta2, cfg.train.eps)
    src, tgt = pair_frames(pair)
    losses: List[float] = []
    for i in range(steps + 1):
        last = i == steps
        loss, _, poses, grads = loss_and_grads(store, src, tgt, pair.gt, cfg, with_grads=not last)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {i}")
        losses.append(loss)
        if i % 50 == 0 or last:
            log.info("step %d loss %.6f", i, loss)
        if not last:
            opt.step(store, grads)
    return TrainResult(pose=poses[0], losses=losses, params=store)
