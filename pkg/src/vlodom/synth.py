"""Synthetic frame pairs with exact ground truth.

Points are sampled in a forward-facing frustum, images are point splats
(each projected point paints a 3x3 patch, far points first), and the target
scan is the source scan rigidly moved by the ground-truth pose.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Pose, format_pose_line, quat_from_axis_angle, transform_points
from .projection import CameraModel, LidarScan, project_to_image

# LiDAR (x forward, y left, z up) -> camera (x right, y down, z forward)
LIDAR_TO_CAMERA = np.array([[0.0, -1.0, 0.0], [0.0, 0.0, -1.0], [1.0, 0.0, 0.0]])

CANONICAL_SEED = 7
CANONICAL_POSE_MAGNITUDE = (np.deg2rad(5.0), 0.3)


def micro_camera() -> CameraModel:
    """320x96 pinhole camera looking along the LiDAR x axis."""
    return CameraModel(
        fx=160.0,
        fy=160.0,
        cx=160.0,
        cy=48.0,
        width=320,
        height=96,
        extrinsic=Pose.from_matrix(_rt(LIDAR_TO_CAMERA, np.zeros(3))),
    )


def _rt(R, t):
    T = np.eye(4)
    T[:3, :3] = R
    T[:3, 3] = t
    return T


@dataclass
class SyntheticPair:
    source: LidarScan
    target: LidarScan
    source_image: np.ndarray
    target_image: np.ndarray
    gt: Pose
    camera: CameraModel
    seed: int


def point_colors(points: np.ndarray) -> np.ndarray:
    """Deterministic smooth RGB in [0, 1] as a function of position."""
    p = np.asarray(points, dtype=np.float64)
    c = np.stack(
        [
            np.sin(1.3 * p[:, 0] + 0.7 * p[:, 1]),
            np.sin(0.9 * p[:, 1] - 1.1 * p[:, 2] + 1.0),
            np.sin(0.5 * p[:, 0] + 1.7 * p[:, 2] + 2.0),
        ],
        axis=1,
    )
    return 0.5 + 0.5 * c


def render_splats(points: np.ndarray, colors: np.ndarray, cam: CameraModel) -> np.ndarray:
    """H x W x 3 image; each visible point paints a 3x3 patch, nearer points on top."""
    img = np.zeros((cam.height, cam.width, 3))
    pix, mask = project_to_image(points, cam)
    depth = transform_points(cam.extrinsic, points)[:, 2]
    idx = np.flatnonzero(mask)
    idx = idx[np.argsort(-depth[idx], kind="stable")]
    for i in idx:
        u, v = int(np.floor(pix[i, 0])), int(np.floor(pix[i, 1]))
        img[max(v - 1, 0) : v + 2, max(u - 1, 0) : u + 2] = colors[i]
    return img


def random_pose(rng: np.random.Generator, angle: float, translation: float) -> Pose:
    """Pose with rotation angle and translation norm exactly as given, random directions."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    return Pose(quat_from_axis_angle(axis, angle), translation * direction)


def sample_points(rng: np.random.Generator, n: int) -> np.ndarray:
    depth = rng.uniform(4.0, 16.0, n)
    az = rng.uniform(-np.deg2rad(35.0), np.deg2rad(35.0), n)
    el = rng.uniform(-np.deg2rad(12.0), np.deg2rad(12.0), n)
    return np.stack([depth * np.cos(el) * np.cos(az), depth * np.cos(el) * np.sin(az), depth * np.sin(el)], axis=1)


def generate_pair(
    seed: int,
    n_points: int = 512,
    pose_magnitude: Tuple[float, float] = CANONICAL_POSE_MAGNITUDE,
    noise_sigma: float = 0.0,
    cam: Optional[CameraModel] = None,
) -> SyntheticPair:
    if n_points < 8:
        raise ValueError("n_points must be >= 8")
    cam = cam or micro_camera()
    rng = np.random.default_rng(seed)
    src = sample_points(rng, n_points)
    angle, trans = pose_magnitude
    gt = random_pose(rng, float(angle), float(trans)) if (angle or trans) else Pose.identity()
    tgt = transform_points(gt, src)
    if noise_sigma > 0:
        tgt = tgt + rng.normal(scale=noise_sigma, size=tgt.shape)
    colors = point_colors(src)
    return SyntheticPair(
        source=LidarScan(src),
        target=LidarScan(tgt),
        source_image=render_splats(src, colors, cam),
        target_image=render_splats(tgt, colors, cam),
        gt=gt,
        camera=cam,
        seed=seed,
    )


def generate_sequence(seed: int, n_frames: int, n_points: int = 512, step: Tuple[float, float] = (0.02, 0.5)):
    """Static scene observed from a smoothly moving sensor.

    Returns ``(scans, images, sensor_poses, camera)``; ``sensor_poses[i]``
    maps frame-i LiDAR coordinates into frame-0 coordinates.
    """
    cam = micro_camera()
    rng = np.random.default_rng(seed)
    scene = sample_points(rng, n_points)
    scene[:, 0] += step[1] * n_frames  # keep the scene ahead of the whole path
    colors = point_colors(scene)
    yaw = rng.uniform(-step[0], step[0])
    motion = Pose(quat_from_axis_angle([0, 0, 1], yaw), np.array([step[1], 0.0, 0.0]))
    poses = [Pose.identity()]
    for _ in range(n_frames - 1):
        poses.append(poses[-1] @ motion)
    scans, images = [], []
    for P in poses:
        local = transform_points(P.inverse(), scene)
        scans.append(LidarScan(local))
        images.append(render_splats(local, colors, cam))
    return scans, images, poses, cam


def write_scan(path, points: np.ndarray, intensity: Optional[np.ndarray] = None) -> None:
    pts = np.asarray(points, dtype=np.float32)
    inten = np.zeros(len(pts), np.float32) if intensity is None else np.asarray(intensity, np.float32)
    np.concatenate([pts, inten[:, None]], axis=1).astype("<f4").tofile(str(path))


def write_image(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)).save(str(path))


def write_calib(path, cam: CameraModel) -> None:
    """KITTI calib.txt with P0..P3 (zero baseline) and Tr (LiDAR -> camera)."""
    P = np.hstack([cam.intrinsic_matrix(), np.zeros((3, 1))])
    Tr = cam.extrinsic.matrix()[:3]
    fmt = lambda a: " ".join(f"{float(v):.17g}" for v in a.reshape(-1))
    lines = [f"P{i}: {fmt(P)}" for i in range(4)] + [f"Tr: {fmt(Tr)}"]
    Path(path).write_text("\n".join(lines) + "\n")


def write_sequence(
    root,
    seq_id: str,
    scans: Sequence[LidarScan],
    images: Sequence[np.ndarray],
    cam: CameraModel,
    lidar_poses: Optional[Sequence[Pose]] = None,
) -> Path:
    """Write frames in the KITTI odometry layout; gt poses are written in the camera frame."""
    root = Path(root)
    seq = root / "sequences" / seq_id
    (seq / "velodyne").mkdir(parents=True, exist_ok=True)
    (seq / "image_2").mkdir(parents=True, exist_ok=True)
    for i, (scan, img) in enumerate(zip(scans, images)):
        write_scan(seq / "velodyne" / f"{i:06d}.bin", scan.points, scan.intensity)
        write_image(seq / "image_2" / f"{i:06d}.png", img)
    write_calib(seq / "calib.txt", cam)
    if lidar_poses is not None:
        Tr = cam.extrinsic.matrix()
        Tr_inv = np.linalg.inv(Tr)
        (root / "poses").mkdir(parents=True, exist_ok=True)
        lines: List[str] = [format_pose_line(Tr @ P.matrix() @ Tr_inv) for P in lidar_poses]
        (root / "poses" / f"{seq_id}.txt").write_text("\n".join(lines) + "\n")
    return seq
