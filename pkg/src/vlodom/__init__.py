"""Visual-LiDAR odometry with clustering-based local fusion and adaptive global fusion."""

from .config import PipelineConfig
from .geometry import Pose, compose_refinement, transform_points
from .projection import CameraModel, CylindricalConfig, LidarScan, cylindrical_project, project_to_image

__all__ = [
    "CameraModel",
    "CylindricalConfig",
    "LidarScan",
    "PipelineConfig",
    "Pose",
    "compose_refinement",
    "cylindrical_project",
    "project_to_image",
    "transform_points",
]

__version__ = "0.1.0"
