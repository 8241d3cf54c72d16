"""Naive reference implementations used only by the tests.

Everything here is written with explicit Python loops over the defining
sums and imports nothing from the optimized kernels, so agreement between
the two is meaningful. These are slow by design.
"""

from __future__ import annotations

import math
from typing import List, Sequence, Tuple

import numpy as np


def brute_softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    x = np.moveaxis(np.asarray(x, dtype=np.float64), axis, -1)
    out = np.empty_like(x)
    for idx in np.ndindex(*x.shape[:-1]):
        row = x[idx]
        m = max(row)
        e = [math.exp(v - m) for v in row]
        s = sum(e)
        out[idx] = [v / s for v in e]
    return np.moveaxis(out, -1, axis)


def brute_sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def brute_leaky(x: float, slope: float = 0.1) -> float:
    return x if x > 0 else slope * x


def brute_mlp(layers: Sequence[Tuple[np.ndarray, np.ndarray]], x: Sequence[float]) -> np.ndarray:
    """Leaky-ReLU hidden layers, linear output; one vector at a time."""
    h = [float(v) for v in x]
    for li, (W, b) in enumerate(layers):
        out = []
        for o in range(W.shape[1]):
            acc = float(b[o])
            for i in range(W.shape[0]):
                acc += h[i] * W[i, o]
            out.append(acc)
        h = [brute_leaky(v) for v in out] if li < len(layers) - 1 else out
    return np.array(h)


def brute_knn(query: np.ndarray, ref: np.ndarray, k: int) -> np.ndarray:
    """Sort every reference point by (squared distance, index)."""
    out = []
    for q in query:
        d = []
        for j, r in enumerate(ref):
            d.append((sum((float(a) - float(b)) ** 2 for a, b in zip(q, r)), j))
        d.sort()
        out.append([j for _, j in d[: min(k, len(ref))]])
    return np.array(out, dtype=np.int64).reshape(len(query), min(k, len(ref)))


def brute_conv(W: np.ndarray, b: np.ndarray, x: np.ndarray, stride: int = 1) -> np.ndarray:
    """TF-style 'same' convolution: output size ceil(n / stride), extra padding at the end."""
    k = W.shape[0]
    H, Wd, Cin = x.shape
    Cout = W.shape[3]
    Ho, Wo = -(-H // stride), -(-Wd // stride)
    pad_h = max((Ho - 1) * stride + k - H, 0)
    pad_w = max((Wo - 1) * stride + k - Wd, 0)
    top, left = pad_h // 2, pad_w // 2
    out = np.zeros((Ho, Wo, Cout))
    for oy in range(Ho):
        for ox in range(Wo):
            for co in range(Cout):
                acc = float(b[co])
                for i in range(k):
                    for j in range(k):
                        y = oy * stride + i - top
                        xx = ox * stride + j - left
                        if 0 <= y < H and 0 <= xx < Wd:
                            for ci in range(Cin):
                                acc += x[y, xx, ci] * W[i, j, ci, co]
                out[oy, ox, co] = acc
    return out


def brute_masked_conv(W: np.ndarray, b: np.ndarray, x: np.ndarray, occ: np.ndarray, stride: int = 1) -> np.ndarray:
    """Occupancy-aware conv: sum over occupied taps, rescaled by in-bounds / occupied tap counts.

    Output cells whose stride block holds no occupied input are zero.
    """
    k = W.shape[0]
    H, Wd, Cin = x.shape
    Cout = W.shape[3]
    Ho, Wo = -(-H // stride), -(-Wd // stride)
    top = max((Ho - 1) * stride + k - H, 0) // 2
    left = max((Wo - 1) * stride + k - Wd, 0) // 2
    out = np.zeros((Ho, Wo, Cout))
    for oy in range(Ho):
        for ox in range(Wo):
            block = [
                occ[y, xx]
                for y in range(oy * stride, min(oy * stride + stride, H))
                for xx in range(ox * stride, min(ox * stride + stride, Wd))
            ]
            if not any(block):
                continue
            n_in, n_occ = 0, 0
            acc = [0.0] * Cout
            for i in range(k):
                for j in range(k):
                    y = oy * stride + i - top
                    xx = ox * stride + j - left
                    if not (0 <= y < H and 0 <= xx < Wd):
                        continue
                    n_in += 1
                    if not occ[y, xx]:
                        continue
                    n_occ += 1
                    for co in range(Cout):
                        for ci in range(Cin):
                            acc[co] += x[y, xx, ci] * W[i, j, ci, co]
            scale = n_in / n_occ if n_occ else 0.0
            for co in range(Cout):
                out[oy, ox, co] = acc[co] * scale + b[co]
    return out


def brute_bilinear(grid: np.ndarray, x: float, y: float) -> np.ndarray:
    """Bilinear interpolation at (x=col, y=row) with border clamping."""
    H, W = grid.shape[:2]
    x = min(max(x, 0.0), W - 1.0)
    y = min(max(y, 0.0), H - 1.0)
    out = np.zeros(grid.shape[2])
    for r in range(H):
        for c in range(W):
            wy = max(0.0, 1.0 - abs(y - r))
            wx = max(0.0, 1.0 - abs(x - c))
            if wx > 0 and wy > 0:
                out += wx * wy * grid[r, c]
    return out


def _tile(row: float, col: float, H: int, W: int, R: int, C: int) -> Tuple[int, int]:
    r = min(max(int(np.rint(row)), 0), H - 1)
    c = min(max(int(np.rint(col)), 0), W - 1)
    return (r * R) // H, (c * C) // W


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(sum(float(v) ** 2 for v in a))
    nb = math.sqrt(sum(float(v) ** 2 for v in b))
    if na == 0 or nb == 0:
        return 0.0
    return min(1.0, max(-1.0, sum(float(u) * float(v) for u, v in zip(a, b)) / (na * nb)))


def brute_cluster_assign(
    center_feat: np.ndarray,
    center_rc: np.ndarray,
    center_valid: np.ndarray,
    pseudo_feat: np.ndarray,
    pseudo_rc: np.ndarray,
    shape: Tuple[int, int],
    grid: Tuple[int, int],
) -> Tuple[np.ndarray, np.ndarray]:
    """Each pseudo point joins the most cosine-similar valid center in its tile.

    Returns ``(center_of, similarity)``; -1 / 0 where the tile has no center.
    Ties go to the lowest center index.
    """
    H, W = shape
    R, C = grid
    center_of = np.full(len(pseudo_feat), -1, dtype=np.int64)
    sims = np.zeros(len(pseudo_feat))
    for m in range(len(pseudo_feat)):
        tm = _tile(pseudo_rc[m][0], pseudo_rc[m][1], H, W, R, C)
        best, best_s = -1, -np.inf
        for i in range(len(center_feat)):
            if not center_valid[i]:
                continue
            if _tile(center_rc[i][0], center_rc[i][1], H, W, R, C) != tm:
                continue
            s = _cos(pseudo_feat[m], center_feat[i])
            if s > best_s:
                best, best_s = i, s
        if best >= 0:
            center_of[m], sims[m] = best, best_s
    return center_of, sims


def brute_aggregate(
    center_feat: np.ndarray,
    center_valid: np.ndarray,
    pseudo_feat: np.ndarray,
    center_of: np.ndarray,
    sims: np.ndarray,
    alpha: float,
    beta: float,
    Wv: np.ndarray,
    bv: np.ndarray,
) -> np.ndarray:
    """Gated mean of each center's value and its members' values."""
    D = Wv.shape[1]
    out = np.zeros((len(center_feat), D))
    for i in range(len(center_feat)):
        if not center_valid[i]:
            continue
        num = center_feat[i] @ Wv + bv
        den = 1.0
        for m in range(len(pseudo_feat)):
            if center_of[m] == i:
                g = brute_sigmoid(alpha * sims[m] + beta)
                num = num + g * (pseudo_feat[m] @ Wv + bv)
                den += g
        out[i] = num / den
    return out


def brute_adaptive_fuse(fp, fl, mask, gate_point, gate_local, Wa, ba) -> np.ndarray:
    """Per-row gated convex combination; rows with ``mask`` false copy ``fp``."""
    out = np.zeros_like(np.asarray(fp, dtype=np.float64))
    for n in range(len(fp)):
        if not mask[n]:
            out[n] = fp[n]
            continue
        f2 = np.array([sum(fl[n][c] * Wa[c, d] for c in range(Wa.shape[0])) + ba[d] for d in range(Wa.shape[1])])
        zp = brute_mlp(gate_point, fp[n])
        zl = brute_mlp(gate_local, f2)
        for d in range(len(f2)):
            ap, al = brute_sigmoid(zp[d]), brute_sigmoid(zl[d])
            out[n, d] = (ap * fp[n][d] + al * f2[d]) / max(ap + al, 1e-12)
    return out


def brute_cost_volume(src_xyz, src_feat, tgt_xyz, tgt_feat, score, value, k) -> np.ndarray:
    """Attention over the K nearest targets with a per-channel softmax."""
    nbr = brute_knn(src_xyz, tgt_xyz, k)
    out = np.zeros((len(src_xyz), value[-1][0].shape[1]))
    for i in range(len(src_xyz)):
        scores, vals = [], []
        for j in nbr[i]:
            rel = [tgt_xyz[j][a] - src_xyz[i][a] for a in range(3)]
            diff = [tgt_feat[j][c] - src_feat[i][c] for c in range(src_feat.shape[1])]
            scores.append(brute_mlp(score, rel + diff))
            vals.append(brute_mlp(value, list(tgt_feat[j]) + rel))
        w = brute_softmax(np.array(scores), axis=0)
        out[i] = sum(w[r] * vals[r] for r in range(len(vals)))
    return out


def brute_embedding_mask(E, F, mask_mlp) -> np.ndarray:
    z = np.array([brute_mlp(mask_mlp, list(E[n]) + list(F[n])) for n in range(len(E))])
    return brute_softmax(z, axis=0)


def brute_quat_multiply(a, b) -> np.ndarray:
    w1, x1, y1, z1 = a
    w2, x2, y2, z2 = b
    return np.array(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ]
    )


def brute_quat_matrix(q) -> np.ndarray:
    """Rotation matrix by conjugating each basis vector: R e_i = q e_i q*."""
    q = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
    qc = q * np.array([1, -1, -1, -1])
    R = np.zeros((3, 3))
    for i in range(3):
        e = np.zeros(4)
        e[i + 1] = 1.0
        R[:, i] = brute_quat_multiply(brute_quat_multiply(q, e), qc)[1:]
    return R


def brute_pose_matrix(q, t) -> np.ndarray:
    T = np.eye(4)
    T[:3, :3] = brute_quat_matrix(q)
    T[:3, 3] = t
    return T


def brute_cylindrical(points, width, height, delta_theta, delta_phi, vertical_offset) -> dict:
    """Map ``(row, col) -> winning point index``: nearest range, then lower index."""
    best = {}
    for i, (x, y, z) in enumerate(points):
        r = math.sqrt(x * x + y * y + z * z)
        if r == 0:
            continue
        col = int(round(math.atan2(y, x) / delta_theta)) % width
        row = int(round((vertical_offset - math.asin(max(-1.0, min(1.0, z / r)))) / delta_phi))
        if not 0 <= row < height:
            continue
        cur = best.get((row, col))
        if cur is None or (r, i) < cur:
            best[(row, col)] = (r, i)
    return {cell: i for cell, (_, i) in best.items()}


def brute_project(P: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Pixel coordinates through a full 3x4 projection matrix."""
    out = []
    for p in pts:
        h = P @ np.array([p[0], p[1], p[2], 1.0])
        out.append([h[0] / h[2], h[1] / h[2]])
    return np.array(out)


def straight_line_trajectories(n: int, spacing: float, scale_error: float) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Ground truth along +z and an estimate that overshoots every step by ``scale_error``."""
    gt, est = [], []
    for i in range(n):
        G = np.eye(4)
        G[2, 3] = i * spacing
        E = np.eye(4)
        E[2, 3] = i * spacing * (1 + scale_error)
        gt.append(G)
        est.append(E)
    return gt, est
