"""Adaptive global fusion of point features with local fused features.

Per occupied pseudo-image cell::

    F_L' = align(F_L)
    A_P  = sigmoid(MLP_p(F_P)),  A_L = sigmoid(MLP_l(F_L'))
    F_G  = (A_P * F_P + A_L * F_L') / (A_P + A_L)

Cells whose point has no image correspondence keep ``F_G = F_P``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .layers import ParamStore, dense, dense_backward, mlp_backward, mlp_forward, sigmoid

@dataclass
class GlobalFuserParams:
    gate_point: List[Tuple[np.ndarray, np.ndarray]]
    gate_local: List[Tuple[np.ndarray, np.ndarray]]
    align_weight: np.ndarray
    align_bias: np.ndarray

    @classmethod
    def from_store(cls, store: ParamStore, level: int) -> "GlobalFuserParams":
        p = f"global_fuser.level{level}"
        return cls(
            gate_point=store.mlp(f"{p}.gate_point"),
            gate_local=store.mlp(f"{p}.gate_local"),
            align_weight=store[f"{p}.align.weight"],
            align_bias=store[f"{p}.align.bias"],
        )


def init_global_fuser_params(store: ParamStore, level: int, c_local: int, d_point: int, rng) -> None:
    p = f"global_fuser.level{level}"
    hidden = max(d_point // 2, 1)
    store.add_mlp(f"{p}.gate_point", (d_point, hidden, d_point), rng)
    store.add_mlp(f"{p}.gate_local", (d_point, hidden, d_point), rng)
    store.add_dense(f"{p}.align", c_local, d_point, rng)


def fuse_rows_forward(fp: np.ndarray, fl: np.ndarray, mask: np.ndarray, params: GlobalFuserParams):
    """Row-wise adaptive fusion; ``mask`` false rows bypass to ``fp``.

    The mixing weight ``A_P / (A_P + A_L)`` is evaluated from log-sigmoids so
    it stays a proper convex weight even when both gates underflow.
    """
    fl2 = dense(params.align_weight, params.align_bias, fl)
    zp, cp = mlp_forward(params.gate_point, fp)
    zl, cl = mlp_forward(params.gate_local, fl2)
    ap, al = sigmoid(zp), sigmoid(zl)
    w = sigmoid(np.logaddexp(0.0, -zl) - np.logaddexp(0.0, -zp))
    fg = fl2 + w * (fp - fl2)
    mask = np.asarray(mask, dtype=bool)
    fg = np.where(mask[:, None], fg, fp)
    cache = dict(fp=fp, fl=fl, fl2=fl2, ap=ap, al=al, w=w, zp=zp, zl=zl, mask=mask, cp=cp, cl=cl, params=params)
    return fg, cache


def fuse_rows_backward(cache, dfg):
    """Returns (d fp, d fl, grads) with grads keyed like the store suffixes."""
    p = cache["params"]
    m = cache["mask"][:, None]
    fp, fl2, w = (cache[k] for k in ("fp", "fl2", "w"))
    dmix = dfg * m
    dfp = dfg * ~m + dmix * w
    dfl2 = dmix * (1 - w)
    # w = sigmoid(log A_P - log A_L); d log sigmoid(z) / dz = sigmoid(-z)
    dd = dmix * (fp - fl2) * w * (1 - w)
    dxp, gp = mlp_backward(p.gate_point, cache["cp"], dd * sigmoid(-cache["zp"]))
    dxl, gl = mlp_backward(p.gate_local, cache["cl"], -dd * sigmoid(-cache["zl"]))
    dfp = dfp + dxp
    dfl2 = dfl2 + dxl
    dfl, dWa, dba = dense_backward(p.align_weight, cache["fl"], dfl2)
    grads = {"align.weight": dWa, "align.bias": dba}
    for name, lg in (("gate_point", gp), ("gate_local", gl)):
        for i, (dW, db) in enumerate(lg):
            grads[f"{name}.{i}.weight"] = dW
            grads[f"{name}.{i}.bias"] = db
    return dfp, dfl, grads


def global_fuse(F_P: np.ndarray, F_L: np.ndarray, occupancy: np.ndarray, fusion_mask_grid: np.ndarray, params: GlobalFuserParams) -> np.ndarray:
    """Fuse on the pseudo-image grid; returns (N, D) rows of the occupied cells in row-major order."""
    occ = np.asarray(occupancy, dtype=bool)
    fg, _ = fuse_rows_forward(F_P[occ], F_L[occ], np.asarray(fusion_mask_grid, bool)[occ], params)
    return fg
