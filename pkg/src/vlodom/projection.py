"""LiDAR/camera structure alignment.

* Cylindrical projection of a scan into an ``H x W`` pseudo-image whose
  occupied cells hold the raw xyz of one point.
* Pinhole projection of LiDAR points onto the camera image plane together
  with the fusion mask.
* Scatter/gather between point-aligned rows and the pseudo-image grid.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .geometry import Pose, transform_points

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LidarScan:
    """Points in the sensor frame: x forward, y left, z up (meters)."""

    points: np.ndarray
    intensity: Optional[np.ndarray] = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) < 1:
            raise InvalidInputError(f"scan must be (N>=1, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("scan contains non-finite coordinates")
        object.__setattr__(self, "points", pts)
        if self.intensity is not None:
            inten = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if len(inten) != len(pts):
                raise InvalidInputError("intensity length does not match point count")
            object.__setattr__(self, "intensity", inten)

    def __len__(self):
        return len(self.points)


@dataclass(frozen=True)
class CylindricalConfig:
    """Angular grid of the range image.

    Columns are centred on multiples of ``delta_theta`` starting at azimuth
    0 (straight ahead); rows are centred on ``vertical_offset - r * delta_phi``
    so row 0 is the top beam.
    """

    width: int = 1800
    height: int = 64
    delta_theta: float = 2 * np.pi / 1800
    delta_phi: float = np.deg2rad(26.8) / 63
    vertical_offset: float = np.deg2rad(2.0)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("cylindrical grid must be at least 1x1")
        if abs(self.width * self.delta_theta - 2 * np.pi) > self.delta_theta:
            raise InvalidInputError("width * delta_theta must cover 2*pi within one column")

    @classmethod
    def from_fov(cls, width: int, height: int, fov_up_deg: float, fov_down_deg: float):
        span = np.deg2rad(fov_up_deg - fov_down_deg)
        return cls(
            width=width,
            height=height,
            delta_theta=2 * np.pi / width,
            delta_phi=span / max(height - 1, 1),
            vertical_offset=np.deg2rad(fov_up_deg),
        )


@dataclass
class PseudoImage:
    """Range image holding raw xyz per occupied cell.

    ``point_index`` maps each occupied cell to a row of the point array
    the image was built from (``-1`` where empty).
    """

    grid: np.ndarray
    occupancy: np.ndarray
    point_index: np.ndarray
    n_source: int
    n_dropped_origin: int = 0
    n_dropped_rows: int = 0

    @property
    def shape(self):
        return self.occupancy.shape

    def surviving_indices(self) -> np.ndarray:
        """Source indices of the occupied cells in row-major cell order."""
        return self.point_index[self.occupancy]

    def points(self) -> np.ndarray:
        """xyz of the occupied cells in row-major cell order."""
        return self.grid[self.occupancy]


def cell_indices(points: np.ndarray, cfg: CylindricalConfig):
    """(row, col) of each point, before range filtering. Undefined at the origin."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    rng = np.sqrt(x * x + y * y + z * z)
    safe = np.where(rng > 0, rng, 1.0)
    az = np.arctan2(y, x)
    el = np.arcsin(np.clip(z / safe, -1.0, 1.0))
    col = np.rint(az / cfg.delta_theta).astype(np.int64) % cfg.width
    row = np.rint((cfg.vertical_offset - el) / cfg.delta_phi).astype(np.int64)
    return row, col, rng


def cylindrical_project(scan: LidarScan | np.ndarray, cfg: CylindricalConfig) -> PseudoImage:
    """Project a scan into a pseudo-image; nearest range wins per cell.

    Ties in range go to the lower point index. Points at the exact origin
    and points outside the vertical span are dropped and counted.
    """
    pts = scan.points if isinstance(scan, LidarScan) else np.asarray(scan, dtype=np.float64)
    n = len(pts)
    row, col, rng = cell_indices(pts, cfg)
    at_origin = rng == 0
    in_rows = (row >= 0) & (row < cfg.height)
    keep = ~at_origin & in_rows
    if at_origin.any():
        log.debug("dropped %d points at the origin", int(at_origin.sum()))

    idx = np.nonzero(keep)[0]
    cells = row[idx] * cfg.width + col[idx]
    order = np.lexsort((idx, rng[idx]))
    cells_sorted = cells[order]
    _, first = np.unique(cells_sorted, return_index=True)
    winners = idx[order[first]]
    win_cells = cells_sorted[first]

    point_index = np.full(cfg.height * cfg.width, -1, dtype=np.int64)
    point_index[win_cells] = winners
    point_index = point_index.reshape(cfg.height, cfg.width)
    occupancy = point_index >= 0
    grid = np.zeros((cfg.height, cfg.width, 3))
    grid[occupancy] = pts[point_index[occupancy]]
    return PseudoImage(
        grid=grid,
        occupancy=occupancy,
        point_index=point_index,
        n_source=n,
        n_dropped_origin=int(at_origin.sum()),
        n_dropped_rows=int((~in_rows & ~at_origin).sum()),
    )


def scatter_to_pseudo_image(values: np.ndarray, pseudo: PseudoImage) -> np.ndarray:
    """Place point-aligned rows onto the pseudo-image grid (zeros elsewhere)."""
    values = np.asarray(values)
    if values.ndim != 2 or values.shape[0] != pseudo.n_source:
        raise InvalidInputError(
            f"values must have {pseudo.n_source} rows aligned with the scan, got {values.shape}"
        )
    H, W = pseudo.shape
    out = np.zeros((H, W, values.shape[1]), dtype=values.dtype)
    out[pseudo.occupancy] = values[pseudo.surviving_indices()]
    return out


def gather_from_pseudo_image(grid: np.ndarray, pseudo: PseudoImage) -> np.ndarray:
    """Rows of the occupied cells in row-major order (aligned with ``surviving_indices``)."""
    return grid[pseudo.occupancy]


# --- camera ----------------------------------------------------------------


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera; ``extrinsic`` maps LiDAR-frame points into the camera frame."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = field(default_factory=Pose.identity)
    z_min: float = 0.1

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidInputError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("image dimensions must be positive")

    def intrinsic_matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def with_image_size(self, width: int, height: int) -> "CameraModel":
        return CameraModel(self.fx, self.fy, self.cx, self.cy, width, height, self.extrinsic, self.z_min)


def project_to_image(scan: LidarScan | np.ndarray, cam: CameraModel):
    """Pixel coordinates ``(x', y')`` of every point and the fusion mask.

    The mask is true where depth exceeds ``cam.z_min`` and the pixel lies in
    ``[0, width) x [0, height)``. Masked-out points still get coordinates.
    """
    pts = scan.points if isinstance(scan, LidarScan) else np.asarray(scan, dtype=np.float64)
    pc = transform_points(cam.extrinsic, pts)
    Z = pc[:, 2]
    Zs = np.where(np.abs(Z) > 1e-12, Z, 1e-12)
    u = cam.fx * pc[:, 0] / Zs + cam.cx
    v = cam.fy * pc[:, 1] / Zs + cam.cy
    mask = (Z > cam.z_min) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=1), mask
