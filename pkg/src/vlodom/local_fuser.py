"""Clustering-based local fusion of image features around projected points.

The image feature map is flattened into pseudo points. Every LiDAR point
that lands in the image becomes a cluster center whose feature is sampled
bilinearly at its projected pixel. Within each rectangular region of the
feature map, a pseudo point joins the center it is most cosine-similar to.
Each center then aggregates its members with sigmoid-gated weights::

    F_L = (v(F_c) + sum_j sig(alpha*s_j + beta) * v(F_pp_j)) / (1 + sum_j sig(alpha*s_j + beta))

where ``v`` is a shared dense value map.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .features import PointFeatureSet
from .layers import ParamStore, bilinear_sample, bilinear_sample_backward, dense, sigmoid

log = logging.getLogger(__name__)


@dataclass
class LocalFuserParams:
    alpha: float
    beta: float
    value_weight: np.ndarray
    value_bias: np.ndarray
    region_rows: int = 1
    region_cols: int = 1
    similarity_with_positions: bool = False
    similarity_on_values: bool = False

    def __post_init__(self):
        if self.region_rows < 1 or self.region_cols < 1:
            raise ValueError("region grid must be at least 1x1")

    @classmethod
    def from_store(cls, store: ParamStore, level: int, region_grid: Tuple[int, int], **switches):
        p = f"local_fuser.level{level}"
        return cls(
            alpha=float(store[f"{p}.alpha"]),
            beta=float(store[f"{p}.beta"]),
            value_weight=store[f"{p}.value.weight"],
            value_bias=store[f"{p}.value.bias"],
            region_rows=region_grid[0],
            region_cols=region_grid[1],
            **switches,
        )

    @classmethod
    def identity(cls, channels: int, alpha=0.0, beta=0.0, region=(1, 1)):
        """Identity value map; convenient for tests and hand checks."""
        return cls(alpha, beta, np.eye(channels), np.zeros(channels), *region)


def init_local_fuser_params(store: ParamStore, level: int, channels: int, rng) -> None:
    p = f"local_fuser.level{level}"
    store[f"{p}.alpha"] = np.float64(1.0)
    store[f"{p}.beta"] = np.float64(0.0)
    store.add_dense(f"{p}.value", channels, channels, rng)


@dataclass
class ClusterAssignment:
    """``center_of[m]`` is the center index of pseudo point ``m`` or -1."""

    center_of: np.ndarray
    similarities: np.ndarray
    n_centers: int

    @property
    def members(self) -> List[np.ndarray]:
        assigned = np.nonzero(self.center_of >= 0)[0]
        order = np.argsort(self.center_of[assigned], kind="stable")
        groups = [np.zeros(0, dtype=np.int64) for _ in range(self.n_centers)]
        sorted_idx = assigned[order]
        centers = self.center_of[sorted_idx]
        bounds = np.searchsorted(centers, np.arange(self.n_centers + 1))
        for i in range(self.n_centers):
            groups[i] = sorted_idx[bounds[i] : bounds[i + 1]]
        return groups

    @property
    def n_unassigned(self) -> int:
        return int(np.sum(self.center_of < 0))


def image_to_pseudo_points(feat: np.ndarray) -> PointFeatureSet:
    """Flatten an (H, W, C) map row-major; coords hold (row, col, 0)."""
    H, W, C = feat.shape
    rows, cols = np.divmod(np.arange(H * W), W)
    coords = np.stack([rows, cols, np.zeros(H * W)], axis=1).astype(np.float64)
    return PointFeatureSet(feat.reshape(H * W, C), coords)


def pseudo_points_to_image(points: PointFeatureSet, shape: Tuple[int, int]) -> np.ndarray:
    H, W = shape
    return points.features.reshape(H, W, -1)


def region_of(rows, cols, shape, grid) -> np.ndarray:
    """Tile id of (possibly fractional) feature-map positions."""
    H, W = shape
    R, C = grid
    r = np.clip(np.rint(rows), 0, H - 1).astype(np.int64)
    c = np.clip(np.rint(cols), 0, W - 1).astype(np.int64)
    return (r * R // H) * C + (c * C // W)


def _unit_rows(x):
    n = np.linalg.norm(x, axis=1)
    safe = np.where(n > 0, n, 1.0)
    return x / safe[:, None], n


def _similarity_features(points: PointFeatureSet, params: LocalFuserParams, shape):
    f = points.features
    if params.similarity_on_values:
        f = dense(params.value_weight, params.value_bias, f)
    if params.similarity_with_positions:
        H, W = shape
        pos = points.coords[:, :2] / np.array([max(H - 1, 1), max(W - 1, 1)])
        f = np.concatenate([f, pos], axis=1)
    return f


def assign_clusters(
    centers: PointFeatureSet,
    pseudo: PointFeatureSet,
    params: LocalFuserParams,
    shape: Tuple[int, int],
    fixed: Optional[np.ndarray] = None,
) -> ClusterAssignment:
    """Region-partitioned argmax-cosine assignment of pseudo points to centers.

    ``centers.coords`` and ``pseudo.coords`` hold (row, col, _) positions on
    the feature map of ``shape``. Centers with ``mask`` false are ignored.
    Ties go to the lowest center index; zero-norm features have similarity 0.
    ``fixed`` replays a previous ``center_of`` and only recomputes the
    similarities (used to hold the discrete structure still in gradient checks).
    """
    n_centers = len(centers)
    valid = np.ones(n_centers, bool) if centers.mask is None else centers.mask
    grid = (params.region_rows, params.region_cols)
    center_ids = np.nonzero(valid)[0]
    c_tile = region_of(centers.coords[center_ids, 0], centers.coords[center_ids, 1], shape, grid)
    p_tile = region_of(pseudo.coords[:, 0], pseudo.coords[:, 1], shape, grid)

    a_unit, a_norm = _unit_rows(_similarity_features(pseudo, params, shape))
    c_unit, c_norm = _unit_rows(_similarity_features(centers, params, shape))
    if np.any(a_norm == 0) or np.any(c_norm[center_ids] == 0):
        log.debug("zero-norm features present; their similarities are 0")

    if fixed is not None:
        center_of = np.asarray(fixed, dtype=np.int64).copy()
        j = np.nonzero(center_of >= 0)[0]
        sims = np.zeros(len(pseudo))
        sims[j] = np.clip(np.sum(a_unit[j] * c_unit[center_of[j]], axis=1), -1.0, 1.0)
        return ClusterAssignment(center_of=center_of, similarities=sims, n_centers=n_centers)
    center_of = np.full(len(pseudo), -1, dtype=np.int64)
    sims = np.zeros(len(pseudo))
    for tile in np.unique(c_tile):
        cids = center_ids[c_tile == tile]  # ascending, so argmax ties -> lowest index
        pids = np.nonzero(p_tile == tile)[0]
        if len(pids) == 0:
            continue
        S = a_unit[pids] @ c_unit[cids].T
        best = np.argmax(S, axis=1)
        center_of[pids] = cids[best]
        sims[pids] = np.clip(S[np.arange(len(pids)), best], -1.0, 1.0)
    return ClusterAssignment(center_of=center_of, similarities=sims, n_centers=n_centers)


def aggregate_clusters_forward(assignment, centers: PointFeatureSet, pseudo: PointFeatureSet, params: LocalFuserParams):
    n = len(centers)
    valid = np.ones(n, bool) if centers.mask is None else centers.mask
    vc = dense(params.value_weight, params.value_bias, centers.features)
    vpp = dense(params.value_weight, params.value_bias, pseudo.features)
    j = np.nonzero(assignment.center_of >= 0)[0]
    ci = assignment.center_of[j]
    s = assignment.similarities[j]
    g = sigmoid(params.alpha * s + params.beta)
    num = vc.copy()
    np.add.at(num, ci, g[:, None] * vpp[j])
    X = 1.0 + np.bincount(ci, weights=g, minlength=n)
    out = num / X[:, None]
    out[~valid] = 0.0
    cache = dict(vc=vc, vpp=vpp, j=j, ci=ci, s=s, g=g, X=X, out=out, valid=valid)
    return out, cache


def aggregate_clusters(assignment, centers: PointFeatureSet, pseudo: PointFeatureSet, params: LocalFuserParams) -> PointFeatureSet:
    """Similarity-gated mean of each center and its members (zero rows where masked)."""
    out, _ = aggregate_clusters_forward(assignment, centers, pseudo, params)
    return PointFeatureSet(out, centers.coords, centers.mask)


def aggregate_clusters_backward(cache, centers, pseudo, params, dout):
    """Gradients wrt value-mapped inputs and gate scalars.

    Returns dict with ``vc``, ``vpp`` (value-space grads), ``s`` (per assigned
    pseudo point), ``alpha``, ``beta``.
    """
    valid, X, out = cache["valid"], cache["X"], cache["out"]
    j, ci, g, s = cache["j"], cache["ci"], cache["g"], cache["s"]
    dout = dout * valid[:, None]
    dnum = dout / X[:, None]
    dX = -np.sum(dout * out, axis=1) / X
    dvc = dnum
    dvpp = np.zeros_like(cache["vpp"])
    dvpp[j] = g[:, None] * dnum[ci]
    dg = np.sum(dnum[ci] * cache["vpp"][j], axis=1) + dX[ci]
    dz = dg * g * (1 - g)
    return dict(vc=dvc, vpp=dvpp, s=dz * params.alpha, alpha=float(np.sum(dz * s)), beta=float(np.sum(dz)))


def centers_from_image(image_feat: np.ndarray, pixel_coords: np.ndarray, mask: np.ndarray) -> PointFeatureSet:
    """Bilinear center features; coords stored as (row, col, 0)."""
    fc = bilinear_sample(image_feat, pixel_coords)
    coords = np.stack([pixel_coords[:, 1], pixel_coords[:, 0], np.zeros(len(pixel_coords))], axis=1)
    return PointFeatureSet(fc, coords, mask)


def local_fuse_forward(
    image_feat: np.ndarray,
    pixel_coords: np.ndarray,
    mask: np.ndarray,
    params: LocalFuserParams,
    fixed_assignment: Optional[np.ndarray] = None,
):
    """Bilinear centers -> assignment -> aggregation. ``pixel_coords`` are (x, y) on the map."""
    H, W, _ = image_feat.shape
    centers = centers_from_image(image_feat, pixel_coords, mask)
    pseudo = image_to_pseudo_points(image_feat)
    assignment = assign_clusters(centers, pseudo, params, (H, W), fixed=fixed_assignment)
    out, acache = aggregate_clusters_forward(assignment, centers, pseudo, params)
    cache = dict(
        image_feat=image_feat, pixel_coords=pixel_coords, centers=centers, pseudo=pseudo,
        assignment=assignment, acache=acache, params=params,
    )
    return out, cache


def local_fuse(image_feat, pixel_coords, mask, params) -> np.ndarray:
    return local_fuse_forward(image_feat, pixel_coords, mask, params)[0]


def _cosine_backward(a, c, ds):
    """Row-wise gradients of ``cos(a_k, c_k)`` scaled by ``ds``."""
    au, an = _unit_rows(a)
    cu, cn = _unit_rows(c)
    s = np.sum(au * cu, axis=1)
    ok = (an > 0) & (cn > 0)
    da = np.where(ok[:, None], (cu - s[:, None] * au) / np.where(an > 0, an, 1.0)[:, None], 0.0) * ds[:, None]
    dc = np.where(ok[:, None], (au - s[:, None] * cu) / np.where(cn > 0, cn, 1.0)[:, None], 0.0) * ds[:, None]
    return da, dc


def local_fuse_backward(cache, dout):
    """Returns (d image_feat, dict of parameter grads keyed alpha/beta/value.weight/value.bias)."""
    params = cache["params"]
    centers, pseudo = cache["centers"], cache["pseudo"]
    image_feat = cache["image_feat"]
    H, W, C = image_feat.shape
    g = aggregate_clusters_backward(cache["acache"], centers, pseudo, params, dout)
    Wv = params.value_weight
    dfc = g["vc"] @ Wv.T
    dfpp = g["vpp"] @ Wv.T
    dWv = centers.features.T @ g["vc"] + pseudo.features.T @ g["vpp"]
    dbv = g["vc"].sum(axis=0) + g["vpp"].sum(axis=0)

    # similarity path (argmax assignment itself is piecewise constant)
    j, ci = cache["acache"]["j"], cache["acache"]["ci"]
    a = _similarity_features(pseudo, params, (H, W))
    c = _similarity_features(centers, params, (H, W))
    da, dc_rows = _cosine_backward(a[j], c[ci], g["s"])
    da_full = np.zeros_like(a)
    da_full[j] = da
    dc_full = np.zeros_like(c)
    np.add.at(dc_full, ci, dc_rows)
    da_full = da_full[:, :C] if params.similarity_with_positions else da_full
    dc_full = dc_full[:, :C] if params.similarity_with_positions else dc_full
    if params.similarity_on_values:
        dWv = dWv + pseudo.features.T @ da_full + centers.features.T @ dc_full
        dbv = dbv + da_full.sum(axis=0) + dc_full.sum(axis=0)
        da_full = da_full @ Wv.T
        dc_full = dc_full @ Wv.T
    dfpp = dfpp + da_full
    dfc = dfc + dc_full

    dimg = dfpp.reshape(H, W, C)
    dgrid, _ = bilinear_sample_backward(image_feat, cache["pixel_coords"], dfc)
    dimg = dimg + dgrid
    grads = {"alpha": g["alpha"], "beta": g["beta"], "value.weight": dWv, "value.bias": dbv}
    return dimg, grads
