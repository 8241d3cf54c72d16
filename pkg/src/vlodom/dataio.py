"""KITTI odometry ingestion: scans, images, calibration and ground-truth poses.

Layout::

    <root>/sequences/<id>/velodyne/NNNNNN.bin
    <root>/sequences/<id>/image_2/NNNNNN.png
    <root>/sequences/<id>/calib.txt
    <root>/poses/<id>.txt            (optional)
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np

from .errors import LoadError, ParseError
from .geometry import Pose, parse_pose_line
from .model import Frame
from .projection import CameraModel, LidarScan

log = logging.getLogger(__name__)

ROTATION_TOLERANCE = 1e-2
KITTI_IMAGE_SIZE = (1241, 376)  # width, height


def load_scan(path) -> LidarScan:
    """Little-endian float32 records ``x y z intensity``; every point is kept."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from None
    if len(raw) == 0:
        raise LoadError(f"{path}: empty scan file")
    if len(raw) % 16:
        raise LoadError(f"{path}: truncated record at byte offset {len(raw) - len(raw) % 16} (size {len(raw)})")
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4)
    bad = ~np.isfinite(data)
    if bad.any():
        flat = int(np.flatnonzero(bad.reshape(-1))[0])
        raise LoadError(f"{path}: non-finite float at byte offset {4 * flat}")
    return LidarScan(data[:, :3].astype(np.float64), data[:, 3].astype(np.float64))


def load_image(path) -> np.ndarray:
    """8-bit color image as an H x W x 3 float array in [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt, mode = im.format, im.mode
            if mode not in ("RGB", "RGBA", "L", "P"):
                raise LoadError(f"{path}: unsupported image format {fmt} mode {mode} (need 8-bit color)")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except UnidentifiedImageError:
        raise LoadError(f"{path}: unsupported image format {path.suffix or '(no extension)'}") from None
    except OSError as exc:
        raise LoadError(f"{path}: {exc}") from None
    return arr.astype(np.float64) / 255.0


def pad_image(img: np.ndarray, target: Tuple[int, int]) -> np.ndarray:
    """Zero-pad at the bottom and right to ``target = (H, W)``."""
    H, W = target
    h, w = img.shape[:2]
    if h > H or w > W:
        raise ValueError(f"image {h}x{w} larger than pad target {H}x{W}")
    out = np.zeros((H, W) + img.shape[2:], dtype=img.dtype)
    out[:h, :w] = img
    return out


def _read_calib_entries(path) -> dict:
    entries = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        key, sep, rest = line.partition(":")
        if not sep:
            raise ParseError(f"{path}:{lineno}: expected 'KEY: values'")
        try:
            entries[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise ParseError(f"{path}:{lineno}: {exc}") from None
    return entries


def load_calib_matrices(path) -> dict:
    """All ``KEY: 12 floats`` entries as 4x4 homogeneous matrices (``P*`` stay 3x4)."""
    try:
        entries = _read_calib_entries(path)
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from None
    out = {}
    for key, vals in entries.items():
        if vals.size != 12:
            continue
        if key.startswith("P"):
            out[key] = vals.reshape(3, 4)
        else:
            T = np.eye(4)
            T[:3] = vals.reshape(3, 4)
            out[key] = T
    return out


def load_calib(path, width: int = KITTI_IMAGE_SIZE[0], height: int = KITTI_IMAGE_SIZE[1]) -> CameraModel:
    """Left color camera model from ``P2`` and ``Tr``.

    The extrinsic maps LiDAR points into the rectified left-color camera:
    ``Tr`` first, then the camera offset ``K^-1 P2[:, 3]`` (for KITTI this is
    the baseline ``P2[0,3] / fx`` along x).
    """
    try:
        entries = _read_calib_entries(path)
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from None
    for key in ("P2", "Tr"):
        if key not in entries:
            raise ParseError(f"{path}: missing key {key}")
        if entries[key].size != 12:
            raise ParseError(f"{path}: {key} needs 12 values, got {entries[key].size}")
    P2 = entries["P2"].reshape(3, 4)
    Tr = np.eye(4)
    Tr[:3] = entries["Tr"].reshape(3, 4)
    K = P2[:, :3]
    offset = np.eye(4)
    offset[:3, 3] = np.linalg.solve(K, P2[:, 3])
    return CameraModel(
        fx=P2[0, 0],
        fy=P2[1, 1],
        cx=P2[0, 2],
        cy=P2[1, 2],
        width=width,
        height=height,
        extrinsic=Pose.from_matrix(offset @ _orthonormalize(Tr, "Tr")),
    )


def _nearest_rotation(R: np.ndarray) -> np.ndarray:
    U, _, Vt = np.linalg.svd(R)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _orthonormalize(T: np.ndarray, where: str) -> np.ndarray:
    R = _nearest_rotation(T[:3, :3])
    corr = float(np.abs(R - T[:3, :3]).max())
    if corr > ROTATION_TOLERANCE:
        raise ParseError(f"{where}: not a rotation (correction {corr:.3g} > {ROTATION_TOLERANCE})")
    out = T.copy()
    out[:3, :3] = R
    return out


def load_gt_poses(path) -> List[Pose]:
    """One 3x4 row-major pose per line; rotations snapped to the nearest rotation."""
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise LoadError(f"{path}: {exc.strerror or exc}") from None
    poses, worst = [], 0.0
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        T = parse_pose_line(line, lineno)
        R = _nearest_rotation(T[:3, :3])
        corr = float(np.abs(R - T[:3, :3]).max())
        if corr > ROTATION_TOLERANCE:
            raise ParseError(f"{path}:{lineno}: not a rotation (correction {corr:.3g})")
        worst = max(worst, corr)
        T[:3, :3] = R
        poses.append(Pose.from_matrix(T))
    log.debug("%s: %d poses, max orthonormalization correction %.3g", path, len(poses), worst)
    return poses


def lidar_relative_poses(cam_poses: Sequence[Pose], Tr: Pose) -> List[Pose]:
    """Frame-to-frame sensor motion in the LiDAR frame: ``Tr^-1 (C_i^-1 C_i+1) Tr``.

    The matching network label (mapping frame-i points into frame i+1) is
    the inverse of each motion.
    """
    Tr_inv = Tr.inverse()
    return [Tr_inv @ (a.inverse() @ b) @ Tr for a, b in zip(cam_poses[:-1], cam_poses[1:])]


class KittiSequence:
    """Lazily loaded KITTI odometry sequence."""

    def __init__(self, root, seq_id: str, pad_to: Tuple[int, int] = (384, 1280)):
        self.root = Path(root)
        self.seq_id = seq_id
        self.pad_to = pad_to
        self.dir = self.root / "sequences" / seq_id
        if not self.dir.is_dir():
            raise LoadError(f"sequence directory not found: {self.dir}")
        self.scan_paths = sorted((self.dir / "velodyne").glob("*.bin"))
        self.image_paths = sorted((self.dir / "image_2").glob("*.png"))
        if not self.scan_paths:
            raise LoadError(f"{self.dir}: no velodyne scans")
        if len(self.scan_paths) != len(self.image_paths):
            raise LoadError(f"{self.dir}: {len(self.scan_paths)} scans but {len(self.image_paths)} images")
        self.calib_path = self.dir / "calib.txt"
        pose_path = self.root / "poses" / f"{seq_id}.txt"
        self.pose_path = pose_path if pose_path.exists() else None
        self._camera: Optional[CameraModel] = None
        self._gt: Optional[List[Pose]] = None

    def __len__(self) -> int:
        return len(self.scan_paths)

    @property
    def camera(self) -> CameraModel:
        if self._camera is None:
            self._camera = load_calib(self.calib_path)
        return self._camera

    @property
    def gt_poses(self) -> Optional[List[Pose]]:
        if self.pose_path is not None and self._gt is None:
            gt = load_gt_poses(self.pose_path)
            if len(gt) != len(self):
                raise LoadError(f"{self.pose_path}: {len(gt)} poses for {len(self)} frames")
            self._gt = gt
        return self._gt

    def frame(self, i: int) -> Frame:
        img = load_image(self.image_paths[i])
        h, w = img.shape[:2]
        return Frame(load_scan(self.scan_paths[i]), pad_image(img, self.pad_to), self.camera.with_image_size(w, h))

    def frames(self) -> Iterator[Frame]:
        """Frames in order, reading the next frame in the background."""
        _ = self.camera
        with ThreadPoolExecutor(max_workers=1) as ex:
            nxt = ex.submit(self.frame, 0)
            for i in range(len(self)):
                cur = nxt.result()
                if i + 1 < len(self):
                    nxt = ex.submit(self.frame, i + 1)
                yield cur

    def pairs(self) -> Iterator[Tuple[Frame, Frame]]:
        prev = None
        for f in self.frames():
            if prev is not None:
                yield prev, f
            prev = f
