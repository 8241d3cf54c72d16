"""Cross-frame association and pose regression.

At each level the (warped) source points attend over their K nearest
target points to build embedding features ``E``. A per-channel softmax
mask over points weights ``E`` before it is pooled and regressed into a
unit quaternion and a translation. The coarsest level gives an initial
pose; every finer level warps its source points with the current estimate
and regresses a residual that is composed on top.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from scipy.spatial import cKDTree

from . import parallel
from .config import N_LEVELS
from .errors import InvalidInputError
from .features import PointFeatureSet
from .geometry import (
    Pose,
    compose_refinement_backward,
    compose_refinement_forward,
    quat_normalize_backward,
    quat_normalize_forward,
    transform_points,
    transform_points_backward,
)
from .layers import ParamStore, mlp_backward, mlp_forward, softmax, softmax_backward

log = logging.getLogger(__name__)

BRUTE_KNN_MAX_TARGETS = 4096


@dataclass
class LevelHeadParams:
    score: list
    value: list
    mask: list
    fc_q: Tuple[np.ndarray, np.ndarray]
    fc_t: Tuple[np.ndarray, np.ndarray]

    @classmethod
    def from_store(cls, store: ParamStore, level: int) -> "LevelHeadParams":
        p = f"pose_head.level{level}"
        return cls(
            score=store.mlp(f"{p}.score"),
            value=store.mlp(f"{p}.value"),
            mask=store.mlp(f"{p}.mask"),
            fc_q=(store[f"{p}.fc_q.weight"], store[f"{p}.fc_q.bias"]),
            fc_t=(store[f"{p}.fc_t.weight"], store[f"{p}.fc_t.bias"]),
        )


def init_pose_head_params(store: ParamStore, level: int, d: int, rng, fc_scale: float = 0.1) -> None:
    p = f"pose_head.level{level}"
    hidden = max(d // 2, 1)
    store.add_mlp(f"{p}.score", (3 + d, hidden, d), rng)
    store.add_mlp(f"{p}.value", (d + 3, d, d), rng)
    store.add_mlp(f"{p}.mask", (2 * d, d, d), rng)
    store.add_dense(f"{p}.fc_q", d, 4, rng)
    store.add_dense(f"{p}.fc_t", d, 3, rng)
    # regression heads start near the identity pose
    store[f"{p}.fc_q.weight"] = (store[f"{p}.fc_q.weight"] * fc_scale).astype(np.float32)
    store[f"{p}.fc_t.weight"] = (store[f"{p}.fc_t.weight"] * fc_scale).astype(np.float32)
    store[f"{p}.fc_q.bias"] = np.array([1.0, 0.0, 0.0, 0.0])
    store[f"{p}.fc_t.bias"] = np.zeros(3)


# --- neighbours ------------------------------------------------------------


def knn(query: np.ndarray, ref: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest ``ref`` rows per query row.

    Sorted by distance, ties broken by lower index. ``k`` is clipped to
    ``len(ref)``.
    """
    if len(ref) == 0:
        raise InvalidInputError("knn: empty reference set")
    k = min(k, len(ref))
    if len(ref) <= BRUTE_KNN_MAX_TARGETS:
        def block(s, e):
            d2 = np.sum((query[s:e, None, :] - ref[None, :, :]) ** 2, axis=2)
            return np.argsort(d2, axis=1, kind="stable")[:, :k]

        return np.concatenate(parallel.map_chunks(block, len(query), 256), axis=0).reshape(len(query), k)
    extra = min(k + 8, len(ref))
    d, idx = cKDTree(ref).query(query, k=extra)
    d = np.atleast_2d(d).reshape(len(query), extra)
    idx = np.atleast_2d(idx).reshape(len(query), extra)
    order = np.lexsort((idx, d), axis=1)
    return np.take_along_axis(idx, order, axis=1)[:, :k]


# --- cost volume -----------------------------------------------------------


def cost_volume_forward(src_xyz, src_feat, tgt_xyz, tgt_feat, params: LevelHeadParams, k: int, nbr=None):
    """``nbr`` optionally replays precomputed neighbour indices."""
    if len(tgt_xyz) == 0:
        raise InvalidInputError("cost volume: empty target set")
    nbr = knn(src_xyz, tgt_xyz, k) if nbr is None else nbr

    def rows(s, e):
        nb = nbr[s:e]
        rel = tgt_xyz[nb] - src_xyz[s:e, None, :]
        tf = tgt_feat[nb]
        diff = tf - src_feat[s:e, None, :]
        z, cs = mlp_forward(params.score, np.concatenate([rel, diff], axis=2))
        w = softmax(z, axis=1)
        val, cv = mlp_forward(params.value, np.concatenate([tf, rel], axis=2))
        return np.sum(w * val, axis=1), (w, val, cs, cv)

    parts = parallel.map_chunks(rows, len(src_xyz))
    E = np.concatenate([p[0] for p in parts], axis=0).reshape(len(src_xyz), -1)
    return E, dict(nbr=nbr, parts=parts, n_src=len(src_xyz), n_tgt=len(tgt_xyz), d=src_feat.shape[1], params=params)


def cost_volume(src: PointFeatureSet, tgt: PointFeatureSet, params: LevelHeadParams, k: int) -> np.ndarray:
    """(N, D) embedding features for the source points."""
    return cost_volume_forward(src.coords, src.features, tgt.coords, tgt.features, params, k)[0]


def cost_volume_backward(cache, dE):
    """Returns (d src_xyz, d src_feat, d tgt_feat, grads{score, value})."""
    params, nbr, D = cache["params"], cache["nbr"], cache["d"]
    n_src, n_tgt = cache["n_src"], cache["n_tgt"]
    dsx = np.zeros((n_src, 3))
    dsf = np.zeros((n_src, D))
    dtf = np.zeros((n_tgt, D))
    gs_tot, gv_tot = None, None
    for (s, e), (_, (w, val, cs, cv)) in zip(parallel.chunk_bounds(n_src), cache["parts"]):
        d = dE[s:e, None, :]
        dval = d * w
        dw = d * val
        dz = softmax_backward(w, dw, axis=1)
        din_s, gs = mlp_backward(params.score, cs, dz)
        din_v, gv = mlp_backward(params.value, cv, dval)
        drel = din_s[..., :3] + din_v[..., D:]
        ddiff = din_s[..., 3:]
        dtf_nb = ddiff + din_v[..., :D]
        dsx[s:e] = -drel.sum(axis=1)
        dsf[s:e] = -ddiff.sum(axis=1)
        np.add.at(dtf, nbr[s:e], dtf_nb)
        gs_tot = gs if gs_tot is None else [(a + c, b + f) for (a, b), (c, f) in zip(gs_tot, gs)]
        gv_tot = gv if gv_tot is None else [(a + c, b + f) for (a, b), (c, f) in zip(gv_tot, gv)]
    return dsx, dsf, dtf, {"score": gs_tot, "value": gv_tot}


# --- mask and regression ---------------------------------------------------


def embedding_mask_forward(E, src_feat, params: LevelHeadParams):
    z, c = mlp_forward(params.mask, np.concatenate([E, src_feat], axis=1))
    M = softmax(z, axis=0)
    return M, (M, c, E.shape[1])


def embedding_mask(E: np.ndarray, F_GS: PointFeatureSet | np.ndarray, params: LevelHeadParams) -> np.ndarray:
    """Per-channel softmax over points; every column sums to 1."""
    f = F_GS.features if isinstance(F_GS, PointFeatureSet) else F_GS
    return embedding_mask_forward(E, f, params)[0]


def embedding_mask_backward(cache, params: LevelHeadParams, dM):
    M, c, D = cache
    dz = softmax_backward(M, dM, axis=0)
    dx, g = mlp_backward(params.mask, c, dz)
    return dx[:, :D], dx[:, D:], g


def regress_pose_forward(E, M, params: LevelHeadParams):
    pooled = np.sum(E * M, axis=0)
    Wq, bq = params.fc_q
    Wt, bt = params.fc_t
    q_raw = pooled @ Wq + bq
    q, ncache = quat_normalize_forward(q_raw)
    t = pooled @ Wt + bt
    return Pose(q, t), (E, M, pooled, ncache)


def regress_pose(E: np.ndarray, M: np.ndarray, params: LevelHeadParams) -> Pose:
    """``q = normalize(FC_q(sum E*M))``, ``t = FC_t(sum E*M)``."""
    return regress_pose_forward(E, M, params)[0]


def regress_pose_backward(cache, params: LevelHeadParams, dq, dt):
    """Returns (dE, dM, grads{fc_q: (dW, db), fc_t: (dW, db)})."""
    E, M, pooled, ncache = cache
    Wq, _ = params.fc_q
    Wt, _ = params.fc_t
    dq_raw = quat_normalize_backward(ncache, dq)
    dp = Wq @ dq_raw + Wt @ dt
    grads = {"fc_q": (np.outer(pooled, dq_raw), dq_raw), "fc_t": (np.outer(pooled, dt), np.asarray(dt, float))}
    return dp[None, :] * M, dp[None, :] * E, grads


# --- coarse-to-fine loop ---------------------------------------------------


@dataclass
class LevelInput:
    """Fused source/target rows entering the pose head at one level."""

    src_xyz: np.ndarray
    src_feat: np.ndarray
    tgt_xyz: np.ndarray
    tgt_feat: np.ndarray


def level_forward(inp: LevelInput, params: LevelHeadParams, k: int, warp: Optional[Pose], nbr=None):
    src = inp.src_xyz if warp is None else transform_points(warp, inp.src_xyz)
    E, ccache = cost_volume_forward(src, inp.src_feat, inp.tgt_xyz, inp.tgt_feat, params, k, nbr)
    M, mcache = embedding_mask_forward(E, inp.src_feat, params)
    pose, rcache = regress_pose_forward(E, M, params)
    return pose, dict(ccache=ccache, mcache=mcache, rcache=rcache, warp=warp, src_xyz=inp.src_xyz, E=E, M=M)


def level_backward(cache, params: LevelHeadParams, dq, dt):
    """Returns (d src_feat, d tgt_feat, d warp_q, d warp_t, grads dict keyed by store suffix)."""
    dE, dM, g_reg = regress_pose_backward(cache["rcache"], params, dq, dt)
    dE2, dF_mask, g_mask = embedding_mask_backward(cache["mcache"], params, dM)
    dsx, dsf, dtf, g_cv = cost_volume_backward(cache["ccache"], dE + dE2)
    dsf = dsf + dF_mask
    dwq = dwt = None
    if cache["warp"] is not None:
        dwq, dwt, _ = transform_points_backward(cache["warp"], cache["src_xyz"], dsx)
    grads = {}
    for name, lg in (("score", g_cv["score"]), ("value", g_cv["value"]), ("mask", g_mask)):
        for i, (dW, db) in enumerate(lg):
            grads[f"{name}.{i}.weight"] = dW
            grads[f"{name}.{i}.bias"] = db
    for name in ("fc_q", "fc_t"):
        grads[f"{name}.weight"], grads[f"{name}.bias"] = g_reg[name]
    return dsf, dtf, dwq, dwt, grads


def iterative_estimate_forward(levels: List[LevelInput], heads: List[LevelHeadParams], k: int, nbrs=None):
    """Poses per level, indexed finest (0) to coarsest (3).

    The coarsest level regresses the initial pose; each finer level
    warps its source points by the next-coarser pose and composes a residual.
    ``nbrs`` optionally replays per-level neighbour indices.
    """
    nbrs = nbrs or [None] * N_LEVELS
    if len(levels) != N_LEVELS:
        raise InvalidInputError(f"need {N_LEVELS} levels, got {len(levels)}")
    poses: List[Optional[Pose]] = [None] * N_LEVELS
    caches = [None] * N_LEVELS
    top = N_LEVELS - 1
    poses[top], lc = level_forward(levels[top], heads[top], k, None, nbrs[top])
    caches[top] = (lc, None)
    for l in range(top - 1, -1, -1):
        delta, lc = level_forward(levels[l], heads[l], k, poses[l + 1], nbrs[l])
        poses[l], ccache = compose_refinement_forward(delta.q, delta.t, poses[l + 1].q, poses[l + 1].t)
        caches[l] = (lc, ccache)
    return poses, caches


def iterative_estimate(levels: List[LevelInput], heads: List[LevelHeadParams], k: int) -> List[Pose]:
    return iterative_estimate_forward(levels, heads, k)[0]


def iterative_estimate_backward(caches, heads: List[LevelHeadParams], dposes):
    """``dposes[l]`` is (dq, dt) or None. Returns per-level (d src_feat, d tgt_feat) and head grads."""
    dq = [np.zeros(4) if d is None else np.array(d[0], float) for d in dposes]
    dt = [np.zeros(3) if d is None else np.array(d[1], float) for d in dposes]
    dfeats = [None] * N_LEVELS
    grads = [None] * N_LEVELS
    for l in range(N_LEVELS):
        lc, ccache = caches[l]
        if ccache is None:
            ddq, ddt = dq[l], dt[l]
        else:
            ddq, ddt, gq_prev, gt_prev = compose_refinement_backward(ccache, dq[l], dt[l])
            dq[l + 1] = dq[l + 1] + gq_prev
            dt[l + 1] = dt[l + 1] + gt_prev
        dsf, dtf, dwq, dwt, g = level_backward(lc, heads[l], ddq, ddt)
        if dwq is not None:
            dq[l + 1] = dq[l + 1] + dwq
            dt[l + 1] = dt[l + 1] + dwt
        dfeats[l] = (dsf, dtf)
        grads[l] = g
    return dfeats, grads
