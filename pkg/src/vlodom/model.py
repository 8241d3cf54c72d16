"""End-to-end visual-LiDAR odometry network for one frame pair.

Data flow per frame: cylindrical pseudo-image -> point pyramid; padded
image -> image pyramid; at each level the level's points are projected into
the image, locally fused with the image features (clustering), and the
result is adaptively fused with the point features. Source/target fused
features then feed the coarse-to-fine pose head.

``forward_pair`` keeps everything needed by ``backward_pair`` so the
micro-trainer and the end-to-end gradient check can run.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from .config import N_LEVELS, PipelineConfig
from .errors import InvalidInputError
from .features import (
    image_pyramid_backward,
    image_pyramid_forward,
    init_backbone_params,
    point_pyramid_backward,
    point_pyramid_forward,
)
from .geometry import Pose
from .global_fuser import GlobalFuserParams, fuse_rows_backward, fuse_rows_forward, init_global_fuser_params
from .layers import ParamStore, accumulate
from .local_fuser import LocalFuserParams, init_local_fuser_params, local_fuse_backward, local_fuse_forward
from .losses import layer_loss_backward, layer_loss_forward
from .pose_head import (
    LevelHeadParams,
    LevelInput,
    init_pose_head_params,
    iterative_estimate_backward,
    iterative_estimate_forward,
)
from .projection import CameraModel, LidarScan, cylindrical_project, project_to_image

log = logging.getLogger(__name__)


@dataclass
class Frame:
    """One synchronized LiDAR scan and padded camera image.

    ``camera`` width/height describe the unpadded image (the fusion mask
    bounds); ``image`` is already padded to the configured size.
    """

    scan: LidarScan
    image: np.ndarray
    camera: CameraModel


def init_params(cfg: PipelineConfig, seed: Optional[int] = None) -> ParamStore:
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    store = ParamStore(seed=seed)
    init_backbone_params(store, cfg, rng)
    for l in range(N_LEVELS):
        c, d = cfg.image_channels[l], cfg.point_channels[l]
        init_local_fuser_params(store, l, c, rng)
        init_global_fuser_params(store, l, c, d, rng)
        init_pose_head_params(store, l, d, rng)
    store["loss.k_x"] = np.float64(cfg.loss.k_x_init)
    store["loss.k_q"] = np.float64(cfg.loss.k_q_init)
    return store


def feature_coords(pixels: np.ndarray, level: int) -> np.ndarray:
    """Image pixel coordinates -> level feature-map coordinates (pixel centres aligned)."""
    s = 2 ** (level + 1)
    return (pixels + 0.5) / s - 0.5


def local_params(store: ParamStore, cfg: PipelineConfig, level: int) -> LocalFuserParams:
    return LocalFuserParams.from_store(
        store,
        level,
        cfg.region_grid(level),
        similarity_with_positions=cfg.similarity_with_positions,
        similarity_on_values=cfg.similarity_on_values,
    )


def forward_frame(store: ParamStore, frame: Frame, cfg: PipelineConfig, assignments=None):
    pseudo = cylindrical_project(frame.scan, cfg.cylindrical_config)
    levels, pcache = point_pyramid_forward(store, pseudo, cfg)
    feats, icache = image_pyramid_forward(store, frame.image, cfg)
    out = []
    for l in range(N_LEVELS):
        lvl = levels[l]
        xyz = lvl.coords
        pix, mask = project_to_image(xyz, frame.camera)
        fpix = feature_coords(pix, l)
        lp = local_params(store, cfg, l)
        fixed = None if assignments is None else assignments[l]
        F_L, lcache = local_fuse_forward(feats[l], fpix, mask, lp, fixed)
        F_P = lvl.grid[lvl.pseudo.occupancy]
        F_G, gcache = fuse_rows_forward(F_P, F_L, mask, GlobalFuserParams.from_store(store, l))
        if not mask.any():
            raise InvalidInputError(f"level {l}: no point projects into the image")
        log.debug("level %d: %d points, %d fusable", l, len(xyz), int(mask.sum()))
        out.append(dict(xyz=xyz, mask=mask, F_G=F_G, lcache=lcache, gcache=gcache, level=lvl, pixels=pix))
    return out, dict(pcache=pcache, icache=icache, feats=feats, pseudo=pseudo)


@dataclass
class Decisions:
    """Discrete choices of one forward pass: cluster assignments and neighbour sets."""

    src_assign: List[np.ndarray]
    tgt_assign: List[np.ndarray]
    nbrs: List[np.ndarray]


def decisions_of(cache) -> Decisions:
    return Decisions(
        src_assign=[fo["lcache"]["assignment"].center_of for fo in cache["fs"]],
        tgt_assign=[fo["lcache"]["assignment"].center_of for fo in cache["ft"]],
        nbrs=[lc["ccache"]["nbr"] for lc, _ in cache["hcache"]],
    )


def forward_pair(store: ParamStore, src: Frame, tgt: Frame, cfg: PipelineConfig, decisions: Optional[Decisions] = None):
    """Per-level poses (finest first) mapping source coordinates into the target frame.

    ``decisions`` replays the discrete choices of an earlier pass so the
    output is a smooth function of the parameters (gradient checking).
    """
    d = decisions
    fs, cs = forward_frame(store, src, cfg, None if d is None else d.src_assign)
    ft, ct = forward_frame(store, tgt, cfg, None if d is None else d.tgt_assign)
    inputs = [
        LevelInput(
            src_xyz=fs[l]["xyz"][fs[l]["mask"]],
            src_feat=fs[l]["F_G"][fs[l]["mask"]],
            tgt_xyz=ft[l]["xyz"][ft[l]["mask"]],
            tgt_feat=ft[l]["F_G"][ft[l]["mask"]],
        )
        for l in range(N_LEVELS)
    ]
    heads = [LevelHeadParams.from_store(store, l) for l in range(N_LEVELS)]
    poses, hcache = iterative_estimate_forward(inputs, heads, cfg.knn, None if d is None else d.nbrs)
    return poses, dict(fs=fs, ft=ft, cs=cs, ct=ct, heads=heads, hcache=hcache)


def estimate(store: ParamStore, src: Frame, tgt: Frame, cfg: PipelineConfig) -> Pose:
    """Final (finest-level) pose estimate for a frame pair."""
    return forward_pair(store, src, tgt, cfg)[0][0]


def _frame_backward(store, cfg, frame_out, frame_cache, d_rows: List[np.ndarray], grads: Dict[str, np.ndarray]):
    dgrids = [None] * N_LEVELS
    dfeats = [None] * N_LEVELS
    for l in range(N_LEVELS):
        fo = frame_out[l]
        dFG = np.zeros_like(fo["F_G"])
        dFG[fo["mask"]] = d_rows[l]
        dFP, dFL, gg = fuse_rows_backward(fo["gcache"], dFG)
        for k, v in gg.items():
            accumulate(grads, f"global_fuser.level{l}.{k}", v)
        lvl = fo["level"]
        dgrid = np.zeros_like(lvl.grid)
        dgrid[lvl.pseudo.occupancy] = dFP
        dgrids[l] = dgrid
        dimg, lg = local_fuse_backward(fo["lcache"], dFL)
        for k, v in lg.items():
            accumulate(grads, f"local_fuser.level{l}.{k}", v)
        dfeats[l] = dimg
    point_pyramid_backward(frame_cache["pcache"], dgrids, grads)
    image_pyramid_backward(frame_cache["icache"], dfeats, grads)


def backward_pair(store: ParamStore, cache, dposes, cfg: PipelineConfig) -> Dict[str, np.ndarray]:
    """Parameter gradients given per-level ``(dq, dt)`` upstream gradients."""
    dlev, head_grads = iterative_estimate_backward(cache["hcache"], cache["heads"], dposes)
    grads: Dict[str, np.ndarray] = {}
    for l in range(N_LEVELS):
        for k, v in head_grads[l].items():
            accumulate(grads, f"pose_head.level{l}.{k}", v)
    _frame_backward(store, cfg, cache["fs"], cache["cs"], [d[0] for d in dlev], grads)
    _frame_backward(store, cfg, cache["ft"], cache["ct"], [d[1] for d in dlev], grads)
    return grads


def loss_and_grads(
    store: ParamStore,
    src: Frame,
    tgt: Frame,
    gt: Pose,
    cfg: PipelineConfig,
    with_grads: bool = True,
    decisions: Optional[Decisions] = None,
):
    """Total weighted loss over levels, per-level losses, poses and (optionally) gradients."""
    poses, cache = forward_pair(store, src, tgt, cfg, decisions)
    k_x, k_q = float(store["loss.k_x"]), float(store["loss.k_q"])
    alpha = cfg.loss.alpha
    per_level, lcaches = [], []
    for l in range(N_LEVELS):
        L, lc = layer_loss_forward(poses[l].q, poses[l].t, gt, k_x, k_q)
        per_level.append(L)
        lcaches.append(lc)
    total = float(np.dot(alpha, per_level))
    if not with_grads:
        return total, per_level, poses, None
    dposes = []
    dkx = dkq = 0.0
    for l in range(N_LEVELS):
        dq, dt, gx, gq = layer_loss_backward(lcaches[l], alpha[l])
        dposes.append((dq, dt))
        dkx += gx
        dkq += gq
    grads = backward_pair(store, cache, dposes, cfg)
    grads["loss.k_x"] = np.float64(dkx)
    grads["loss.k_q"] = np.float64(dkq)
    return total, per_level, poses, grads
