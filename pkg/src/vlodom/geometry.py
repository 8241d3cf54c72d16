"""Quaternion and rigid-transform algebra.

Conventions: Hamilton product, ``(w, x, y, z)`` component order, active
rotations. Quaternions are plain ``float64`` arrays of shape ``(4,)``.
Normalized quaternions are sign-canonical (``w >= 0``).

Every differentiable operation has a ``*_backward`` companion taking the
upstream gradient and returning gradients for the inputs.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import InvalidInputError, ParseError

log = logging.getLogger(__name__)

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])
DEGENERATE_NORM = 1e-12


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise InvalidInputError(f"{name}: non-finite input")


# --- quaternions -----------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    """Unit-normalize and canonicalize the sign so that ``w >= 0``.

    A near-zero quaternion (norm below 1e-12) maps to the identity with a
    warning; this happens when a regression head outputs ~0.
    """
    return quat_normalize_forward(q)[0]


def quat_normalize_forward(q):
    q = np.asarray(q, dtype=np.float64)
    _check_finite("quat_normalize", q)
    n = float(np.linalg.norm(q))
    if n < DEGENERATE_NORM:
        log.warning("near-zero quaternion (norm %.3g) replaced by identity", n)
        return IDENTITY_QUAT.copy(), (q, n, 0.0)
    sign = -1.0 if q[0] < 0 else 1.0
    return sign * q / n, (q, n, sign)


def quat_normalize_backward(cache, dout):
    q, n, sign = cache
    if sign == 0.0:
        return np.zeros(4)
    u = q / n
    return sign * (dout - u * np.dot(u, dout)) / n


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_inverse(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return quat_conjugate(q) / np.dot(q, q)


def hamilton(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Raw (unnormalized) Hamilton product ``a * b``."""
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def _left_matrix(a):
    # hamilton(a, b) == _left_matrix(a) @ b
    aw, ax, ay, az = a
    return np.array(
        [
            [aw, -ax, -ay, -az],
            [ax, aw, -az, ay],
            [ay, az, aw, -ax],
            [az, -ay, ax, aw],
        ]
    )


def _right_matrix(b):
    # hamilton(a, b) == _right_matrix(b) @ a
    bw, bx, by, bz = b
    return np.array(
        [
            [bw, -bx, -by, -bz],
            [bx, bw, bz, -by],
            [by, -bz, bw, bx],
            [bz, by, -bx, bw],
        ]
    )


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Normalized Hamilton product: rotation ``b`` followed by ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_finite("quat_multiply", a, b)
    return quat_normalize(hamilton(a, b))


def quat_multiply_forward(a, b):
    raw = hamilton(a, b)
    out, ncache = quat_normalize_forward(raw)
    return out, (a, b, ncache)


def quat_multiply_backward(cache, dout):
    a, b, ncache = cache
    draw = quat_normalize_backward(ncache, dout)
    return _right_matrix(b).T @ draw, _left_matrix(a).T @ draw


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """3x3 rotation matrix of a unit quaternion."""
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _matrix_jacobian(q):
    """dR/dq as a (4, 3, 3) array for the polynomial form of ``quat_to_matrix``."""
    w, x, y, z = q
    return 2.0 * np.array(
        [
            [[0, -z, y], [z, 0, -x], [-y, x, 0]],
            [[0, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
            [[-2 * y, x, w], [x, 0, z], [-w, z, -2 * y]],
            [[-2 * z, -w, x], [w, -2 * z, y], [x, y, 0]],
        ]
    )


def matrix_to_quat(R: np.ndarray) -> np.ndarray:
    """Unit quaternion (w >= 0) of a proper rotation matrix (Shepperd's method)."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    diag = np.diag(R)
    k = int(np.argmax([tr, *diag]))
    if k == 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif k == 1:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif k == 2:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    return quat_normalize(np.array(q))


def quat_from_axis_angle(axis: Sequence[float], angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    return quat_normalize(np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis]))


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle in radians, in [0, pi]."""
    q = quat_normalize(q)
    return 2.0 * float(np.arctan2(np.linalg.norm(q[1:]), q[0]))


def rotate_vector(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate one vector (3,) or a batch (N, 3) by unit quaternion ``q``."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    _check_finite("rotate_vector", q, v)
    return v @ quat_to_matrix(q).T


def rotate_vector_backward(q, v, dout):
    """Gradients of ``rotate_vector`` with respect to ``q`` and ``v``."""
    R = quat_to_matrix(q)
    v2 = np.atleast_2d(v)
    d2 = np.atleast_2d(dout)
    G = d2.T @ v2  # dL/dR
    dq = np.einsum("kij,ij->k", _matrix_jacobian(q), G)
    dv = (d2 @ R).reshape(np.shape(v))
    return dq, dv


# --- poses -----------------------------------------------------------------


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``p -> R(q) p + t``."""

    q: np.ndarray = field(default_factory=lambda: IDENTITY_QUAT.copy())
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(4)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        _check_finite("Pose", q, t)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()

    @classmethod
    def from_matrix(cls, T: np.ndarray) -> "Pose":
        T = np.asarray(T, dtype=np.float64)
        return cls(matrix_to_quat(T[:3, :3]), T[:3, 3].copy())

    def matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = quat_to_matrix(self.q)
        T[:3, 3] = self.t
        return T

    def inverse(self) -> "Pose":
        qi = quat_normalize(quat_conjugate(self.q))
        return Pose(qi, -rotate_vector(qi, self.t))

    def __matmul__(self, other: "Pose") -> "Pose":
        return Pose(quat_multiply(self.q, other.q), rotate_vector(self.q, other.t) + self.t)

    def normalized(self) -> "Pose":
        return Pose(quat_normalize(self.q), self.t)


def compose_refinement(delta: Pose, prev: Pose) -> Pose:
    """Apply a residual pose on top of a coarser estimate.

    ``q = dq * q_prev`` and ``t = dq t_prev dq^-1 + dt``; identical to the
    matrix product ``T(delta) @ T(prev)``.
    """
    return compose_refinement_forward(delta.q, delta.t, prev.q, prev.t)[0]


def compose_refinement_forward(dq, dt, q_prev, t_prev):
    dq_n, ncache = quat_normalize_forward(dq)
    q, mcache = quat_multiply_forward(dq_n, q_prev)
    t = rotate_vector(dq_n, t_prev) + dt
    return Pose(q, t), (dq_n, t_prev, ncache, mcache)


def compose_refinement_backward(cache, dq_out, dt_out):
    """Returns gradients for (delta.q, delta.t, prev.q, prev.t)."""
    dq_n, t_prev, ncache, mcache = cache
    g_dqn, g_qprev = quat_multiply_backward(mcache, dq_out)
    g_dqn2, g_tprev = rotate_vector_backward(dq_n, t_prev, dt_out)
    g_dq = quat_normalize_backward(ncache, g_dqn + g_dqn2)
    return g_dq, np.array(dt_out, dtype=np.float64), g_qprev, g_tprev


def transform_points(pose: Pose, pts: np.ndarray) -> np.ndarray:
    """Map each row ``p`` of an (N, 3) array to ``R(q) p + t``."""
    pts = np.asarray(pts, dtype=np.float64)
    _check_finite("transform_points", pts)
    return pts @ quat_to_matrix(pose.q).T + pose.t


def transform_points_backward(pose: Pose, pts, dout):
    """Gradients of ``transform_points`` with respect to (q, t, pts)."""
    dq, dpts = rotate_vector_backward(pose.q, pts, dout)
    return dq, np.asarray(dout).sum(axis=0), dpts


# --- KITTI pose text -------------------------------------------------------


def format_pose_line(pose_or_matrix) -> str:
    """Row-major 3x4 ``[R|t]`` as 12 space-separated floats.

    17 significant digits, so parsing the line recovers every float64 exactly.
    """
    T = pose_or_matrix.matrix() if isinstance(pose_or_matrix, Pose) else np.asarray(pose_or_matrix)
    return " ".join(f"{float(v):.17g}" for v in T[:3, :4].reshape(-1))


def parse_pose_line(line: str, lineno: int = 0) -> np.ndarray:
    """Parse one KITTI pose line into a 4x4 homogeneous matrix."""
    parts = line.split()
    if len(parts) != 12:
        raise ParseError(f"line {lineno}: expected 12 floats, got {len(parts)}")
    try:
        vals = np.array([float(p) for p in parts])
    except ValueError as exc:
        raise ParseError(f"line {lineno}: {exc}") from None
    if not np.all(np.isfinite(vals)):
        raise ParseError(f"line {lineno}: non-finite value")
    T = np.eye(4)
    T[:3, :4] = vals.reshape(3, 4)
    return T


def write_poses(path, poses: Iterable[Pose]) -> None:
    with open(path, "w") as f:
        for p in poses:
            f.write(format_pose_line(p) + "\n")
