"""Hierarchical feature extraction for the image and the LiDAR pseudo-image.

Both pyramids have four levels of two 3x3 convolutions each (stride 2 then
stride 1, leaky-ReLU after each), so level ``l`` sits at stride ``2**(l+1)``.
The point pyramid uses occupancy-aware convolutions and carries, per level,
a decimated pseudo-image whose occupied cells are that level's points.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional

import numpy as np

from .config import N_LEVELS, PipelineConfig
from .errors import InvalidInputError
from .layers import (
    ParamStore,
    accumulate,
    conv2d_backward,
    conv2d_forward,
    leaky_relu,
    leaky_relu_grad,
    masked_conv2d_backward,
    masked_conv2d_forward,
    pool_occupancy,
)
from .projection import PseudoImage


@dataclass
class PointFeatureSet:
    """Row-aligned features and 3D (or pixel) coordinates."""

    features: np.ndarray
    coords: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if len(self.features) != len(self.coords):
            raise InvalidInputError("features and coords must be row-aligned")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if len(self.mask) != len(self.features):
                raise InvalidInputError("mask must be row-aligned with features")

    def __len__(self):
        return len(self.features)


@dataclass
class PointLevel:
    """One point-pyramid level: its points, their features and the pseudo-image."""

    pseudo: PseudoImage
    grid: np.ndarray
    source_index: np.ndarray

    @property
    def coords(self) -> np.ndarray:
        return self.pseudo.points()

    @property
    def features(self) -> PointFeatureSet:
        return PointFeatureSet(self.grid[self.pseudo.occupancy], self.coords)

    def __len__(self):
        return int(self.pseudo.occupancy.sum())


def init_backbone_params(store: ParamStore, cfg: PipelineConfig, rng: np.random.Generator) -> None:
    c_in = 3
    for l, c in enumerate(cfg.image_channels):
        store.add_conv(f"image_pyramid.level{l}.conv_a", 3, c_in, c, rng)
        store.add_conv(f"image_pyramid.level{l}.conv_b", 3, c, c, rng)
        c_in = c
    d_in = 3
    for l, d in enumerate(cfg.point_channels):
        store.add_conv(f"point_pyramid.level{l}.conv_a", 3, d_in, d, rng)
        store.add_conv(f"point_pyramid.level{l}.conv_b", 3, d, d, rng)
        d_in = d


# --- image pyramid ---------------------------------------------------------


def image_pyramid_forward(store: ParamStore, image: np.ndarray, cfg: PipelineConfig):
    image = np.asarray(image, dtype=np.float64)
    target = tuple(cfg.image_size)
    if image.ndim != 3 or image.shape[2] != 3:
        raise InvalidInputError(f"image must be (H, W, 3), got {image.shape}")
    if image.shape[:2] != target:
        if image.shape[0] < target[0] or image.shape[1] < target[1]:
            raise InvalidInputError(f"image {image.shape[:2]} smaller than pad target {target}; pad it first")
        raise InvalidInputError(f"image {image.shape[:2]} does not match pad target {target}")
    feats, caches = [], []
    h = image
    for l in range(N_LEVELS):
        p = f"image_pyramid.level{l}"
        za, ca = conv2d_forward(store[f"{p}.conv_a.weight"], store[f"{p}.conv_a.bias"], h, stride=2)
        ha = leaky_relu(za)
        zb, cb = conv2d_forward(store[f"{p}.conv_b.weight"], store[f"{p}.conv_b.bias"], ha, stride=1)
        h = leaky_relu(zb)
        feats.append(h)
        caches.append((ca, za, cb, zb))
    return feats, caches


def image_pyramid(store: ParamStore, image: np.ndarray, cfg: PipelineConfig) -> List[np.ndarray]:
    return image_pyramid_forward(store, image, cfg)[0]


def image_pyramid_backward(caches, dfeats, grads) -> np.ndarray:
    """Accumulate parameter gradients; ``dfeats[l]`` may be None. Returns d(image)."""
    carry = None
    for l in range(N_LEVELS - 1, -1, -1):
        ca, za, cb, zb = caches[l]
        d = dfeats[l]
        if carry is not None:
            d = carry if d is None else d + carry
        if d is None:
            carry = None
            continue
        p = f"image_pyramid.level{l}"
        d = d * leaky_relu_grad(zb)
        d, dW, db = conv2d_backward(cb, d)
        accumulate(grads, f"{p}.conv_b.weight", dW)
        accumulate(grads, f"{p}.conv_b.bias", db)
        d = d * leaky_relu_grad(za)
        d, dW, db = conv2d_backward(ca, d)
        accumulate(grads, f"{p}.conv_a.weight", dW)
        accumulate(grads, f"{p}.conv_a.bias", db)
        carry = d
    return carry


# --- point pyramid ---------------------------------------------------------


def decimate_pseudo_image(pseudo: PseudoImage, stride: int = 2):
    """Keep the nearest-range point of every ``stride x stride`` block.

    Returns the coarse pseudo-image (its ``point_index`` enumerates the
    coarse points in row-major order) and, per coarse point, the index of
    the chosen point in ``pseudo``'s point list.
    """
    H, W = pseudo.shape
    occ_out = pool_occupancy(pseudo.occupancy, stride)
    Ho, Wo = occ_out.shape
    rr, cc = np.nonzero(pseudo.occupancy)
    rng = np.linalg.norm(pseudo.grid[rr, cc], axis=1)
    block = (rr // stride) * Wo + (cc // stride)
    fine_cell = rr * W + cc
    order = np.lexsort((fine_cell, rng, block))
    blocks_sorted = block[order]
    _, first = np.unique(blocks_sorted, return_index=True)
    chosen = order[first]  # positions among occupied fine cells, sorted by block id
    grid = np.zeros((Ho, Wo, 3))
    point_index = np.full((Ho, Wo), -1, dtype=np.int64)
    br, bc = np.divmod(blocks_sorted[first], Wo)
    grid[br, bc] = pseudo.grid[rr[chosen], cc[chosen]]
    point_index[br, bc] = np.arange(len(chosen))
    coarse = PseudoImage(grid=grid, occupancy=point_index >= 0, point_index=point_index, n_source=len(chosen))
    parent = pseudo.point_index[rr[chosen], cc[chosen]]
    return coarse, parent


def point_pyramid_forward(store: ParamStore, pseudo: PseudoImage, cfg: PipelineConfig):
    if not pseudo.occupancy.any():
        raise InvalidInputError("empty scan: pseudo-image has no occupied cells")
    levels: List[PointLevel] = []
    caches = []
    h = pseudo.grid
    occ = pseudo.occupancy
    current = pseudo
    for l in range(N_LEVELS):
        p = f"point_pyramid.level{l}"
        za, ca = masked_conv2d_forward(store[f"{p}.conv_a.weight"], store[f"{p}.conv_a.bias"], h, occ, stride=2)
        occ_a = pool_occupancy(occ, 2)
        ha = leaky_relu(za) * occ_a[..., None]
        zb, cb = masked_conv2d_forward(store[f"{p}.conv_b.weight"], store[f"{p}.conv_b.bias"], ha, occ_a, stride=1)
        h = leaky_relu(zb) * occ_a[..., None]
        coarse, parent = decimate_pseudo_image(current, 2)
        # level 0 decimates the raw image, whose point_index already refers to the scan
        src = parent if l == 0 else levels[-1].source_index[parent]
        levels.append(PointLevel(pseudo=coarse, grid=h, source_index=src))
        caches.append((ca, za, cb, zb, occ_a))
        current, occ = coarse, occ_a
    return levels, caches


def point_pyramid(store: ParamStore, pseudo: PseudoImage, cfg: PipelineConfig) -> List[PointLevel]:
    return point_pyramid_forward(store, pseudo, cfg)[0]


def point_pyramid_backward(caches, dgrids, grads) -> None:
    """Accumulate parameter gradients from per-level grid gradients (None allowed)."""
    carry = None
    for l in range(N_LEVELS - 1, -1, -1):
        ca, za, cb, zb, occ_a = caches[l]
        d = dgrids[l]
        if carry is not None:
            d = carry if d is None else d + carry
        if d is None:
            carry = None
            continue
        p = f"point_pyramid.level{l}"
        d = d * occ_a[..., None] * leaky_relu_grad(zb)
        d, dW, db = masked_conv2d_backward(cb, d)
        accumulate(grads, f"{p}.conv_b.weight", dW)
        accumulate(grads, f"{p}.conv_b.bias", db)
        d = d * occ_a[..., None] * leaky_relu_grad(za)
        d, dW, db = masked_conv2d_backward(ca, d)
        accumulate(grads, f"{p}.conv_a.weight", dW)
        accumulate(grads, f"{p}.conv_a.bias", db)
        carry = d
