"""KITTI odometry evaluation and trajectory utilities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from .errors import InvalidInputError
from .geometry import Pose

DEFAULT_LENGTHS = (100, 200, 300, 400, 500, 600, 700, 800)
DEFAULT_STEP = 10


@dataclass
class TrajectoryEval:
    """``t_rel`` in percent, ``r_rel`` in degrees per 100 m."""

    t_rel: float
    r_rel: float
    per_length: Dict[int, tuple] = field(default_factory=dict)
    n_segments: int = 0

    def summary_line(self) -> str:
        return f"t_rel={self.t_rel:.6g} r_rel={self.r_rel:.6g}"

    def report(self) -> str:
        lines = [f"{'length[m]':>10} {'segments':>9} {'t_rel[%]':>10} {'r_rel[deg/100m]':>16}"]
        for length, (t, r, n) in sorted(self.per_length.items()):
            lines.append(f"{length:>10d} {n:>9d} {t:>10.4f} {r:>16.4f}")
        lines.append(f"{'mean':>10} {self.n_segments:>9d} {self.t_rel:>10.4f} {self.r_rel:>16.4f}")
        lines.append(self.summary_line())
        return "\n".join(lines)


def _as_matrices(traj) -> np.ndarray:
    return np.stack([p.matrix() if isinstance(p, Pose) else np.asarray(p, float) for p in traj])


def _relative(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """``inv(A) @ B`` for rigid transforms."""
    Rt = A[:3, :3].T
    out = np.eye(4)
    out[:3, :3] = Rt @ B[:3, :3]
    out[:3, 3] = Rt @ (B[:3, 3] - A[:3, 3])
    return out


def trajectory_distances(poses: np.ndarray) -> np.ndarray:
    steps = np.linalg.norm(np.diff(poses[:, :3, 3], axis=0), axis=1)
    return np.concatenate([[0.0], np.cumsum(steps)])


def rotation_angle(R: np.ndarray) -> float:
    """Angle of a rotation matrix; atan2 form of ``acos((trace - 1) / 2)``."""
    c = 0.5 * (np.trace(R) - 1.0)
    s = 0.5 * np.linalg.norm([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return float(np.arctan2(s, c))


def kitti_eval(
    gt_traj: Sequence,
    est_traj: Sequence,
    path_lengths: Sequence[int] = DEFAULT_LENGTHS,
    step: int = DEFAULT_STEP,
) -> TrajectoryEval:
    """Average relative translational / rotational drift over fixed path lengths.

    Segments start every ``step`` frames; a segment of length ``L`` ends at
    the first frame whose ground-truth arc length reaches ``L``.
    """
    gt = _as_matrices(gt_traj)
    est = _as_matrices(est_traj)
    if len(gt) != len(est):
        raise InvalidInputError(f"trajectory lengths differ: gt {len(gt)} vs est {len(est)}")
    if len(gt) < 2:
        raise InvalidInputError("need at least two poses")
    dist = trajectory_distances(gt)
    total = dist[-1]
    usable = [L for L in path_lengths if L <= total]
    if not usable:
        raise InvalidInputError(
            f"trajectory arc length {total:.2f} m is shorter than every segment length "
            f"{list(path_lengths)}; usable lengths: {usable}"
        )
    per: Dict[int, List[tuple]] = {L: [] for L in path_lengths}
    for first in range(0, len(gt), step):
        for L in path_lengths:
            last = int(np.searchsorted(dist, dist[first] + L, side="left"))
            if last >= len(gt):
                continue
            d_gt = _relative(gt[first], gt[last])
            d_est = _relative(est[first], est[last])
            # inv(d_gt) @ d_est, written so identical inputs cancel exactly
            R_gt_t = d_gt[:3, :3].T
            E_R = R_gt_t @ d_est[:3, :3]
            E_t = R_gt_t @ (d_est[:3, 3] - d_gt[:3, 3])
            per[L].append((np.linalg.norm(E_t) / L, rotation_angle(E_R) / L))
    errs = [e for L in path_lengths for e in per[L]]
    if not errs:
        raise InvalidInputError(f"no complete segments; usable lengths: {usable}")
    arr = np.array(errs)
    per_length = {}
    for L in path_lengths:
        if per[L]:
            a = np.array(per[L])
            per_length[L] = (100 * a[:, 0].mean(), 100 * np.degrees(a[:, 1].mean()), len(a))
    return TrajectoryEval(
        t_rel=float(100 * arr[:, 0].mean()),
        r_rel=float(100 * np.degrees(arr[:, 1].mean())),
        per_length=per_length,
        n_segments=len(arr),
    )


def accumulate_trajectory(relative: Sequence[Pose]) -> List[Pose]:
    """Absolute poses from frame-to-frame motions: ``P[i+1] = P[i] @ rel[i]``."""
    poses = [Pose.identity()]
    for rel in relative:
        poses.append(poses[-1] @ rel)
    return poses


def plot_trajectories(path, gt: Sequence, est: Sequence, title: str = "") -> None:
    """Top-down (x-z) and 3D views of ground truth vs estimate."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    g = _as_matrices(gt)[:, :3, 3]
    e = _as_matrices(est)[:, :3, 3]
    fig = plt.figure(figsize=(10, 4.5))
    ax = fig.add_subplot(1, 2, 1)
    ax.plot(g[:, 0], g[:, 2], "k-", label="ground truth")
    ax.plot(e[:, 0], e[:, 2], "r--", label="estimate")
    ax.plot(g[0, 0], g[0, 2], "bs", label="start")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal", adjustable="datalim")
    ax.legend(loc="best")
    ax3 = fig.add_subplot(1, 2, 2, projection="3d")
    ax3.plot(g[:, 0], g[:, 2], g[:, 1], "k-")
    ax3.plot(e[:, 0], e[:, 2], e[:, 1], "r--")
    ax3.set_xlabel("x")
    ax3.set_ylabel("z")
    ax3.set_zlabel("y")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
