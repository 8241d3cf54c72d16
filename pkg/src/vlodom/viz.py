"""Cluster-assignment overlay: which image pixels each LiDAR point gathers."""

from __future__ import annotations

import colorsys
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .features import image_pyramid
from .layers import ParamStore
from .local_fuser import assign_clusters, centers_from_image, image_to_pseudo_points
from .model import Frame, feature_coords, local_params
from .projection import project_to_image


def palette(n: int) -> np.ndarray:
    """``n`` well-separated colors (golden-ratio hue steps), uint8 RGB."""
    out = np.zeros((n, 3), dtype=np.uint8)
    for i in range(n):
        h = (i * 0.618033988749895) % 1.0
        out[i] = np.round(np.array(colorsys.hsv_to_rgb(h, 0.85, 0.95)) * 255)
    return out


def cluster_map(store: ParamStore, frame: Frame, cfg: PipelineConfig, level: int = 0) -> np.ndarray:
    """Center index of every feature-map pixel at ``level`` (-1 when unassigned)."""
    feats = image_pyramid(store, frame.image, cfg)
    feat = feats[level]
    pix, mask = project_to_image(frame.scan, frame.camera)
    centers = centers_from_image(feat, feature_coords(pix, level), mask)
    pseudo = image_to_pseudo_points(feat)
    a = assign_clusters(centers, pseudo, local_params(store, cfg, level), feat.shape[:2])
    return a.center_of.reshape(feat.shape[:2])


def render_overlay(image: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Assigned pixels take their cluster's color; the rest show the dimmed grayscale image."""
    H, W = image.shape[:2]
    s = H // labels.shape[0]
    up = np.repeat(np.repeat(labels, s, axis=0), s, axis=1)[:H, :W]
    gray = np.round(image.mean(axis=2) * 255 * 0.4).astype(np.uint8)
    out = np.repeat(gray[..., None], 3, axis=2)
    n = int(labels.max()) + 1 if labels.size and labels.max() >= 0 else 0
    if n:
        pal = palette(n)
        sel = up >= 0
        out[sel] = pal[up[sel]]
    return out


def write_ppm(path, rgb: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(rgb, mode="RGB").save(str(Path(path)), format="PPM")
