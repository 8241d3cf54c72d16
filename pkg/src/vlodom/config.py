"""Pipeline configuration.

Serialized as YAML with nested sections. Unknown keys are rejected so a
typo never silently falls back to a default. Two built-in profiles exist:
``full`` (KITTI-sized) and ``micro`` (desk-scale tests and training).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np
import yaml

from .errors import ParseError
from .projection import CylindricalConfig

N_LEVELS = 4


@dataclass
class CylindricalSection:
    width: int = 1800
    height: int = 64
    fov_up_deg: float = 2.0
    fov_down_deg: float = -24.8

    def build(self) -> CylindricalConfig:
        return CylindricalConfig.from_fov(self.width, self.height, self.fov_up_deg, self.fov_down_deg)


@dataclass
class LossSection:
    alpha: Tuple[float, ...] = (1.6, 0.8, 0.4, 0.2)
    k_x_init: float = 0.0
    k_q_init: float = -2.5


@dataclass
class TrainSection:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class PipelineConfig:
    cylindrical: CylindricalSection = field(default_factory=CylindricalSection)
    image_size: Tuple[int, int] = (384, 1280)
    image_channels: Tuple[int, ...] = (16, 32, 64, 128)
    point_channels: Tuple[int, ...] = (32, 64, 128, 256)
    region_size: Tuple[int, int] = (24, 40)
    knn: int = 16
    similarity_with_positions: bool = False
    similarity_on_values: bool = False
    z_min: float = 0.1
    seed: int = 0
    loss: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if len(self.image_channels) != N_LEVELS or len(self.point_channels) != N_LEVELS:
            raise ParseError(f"channel profiles must have {N_LEVELS} levels")
        if len(self.loss.alpha) != N_LEVELS:
            raise ParseError(f"loss.alpha must have {N_LEVELS} entries")
        if any(a < 0 or not np.isfinite(a) for a in self.loss.alpha):
            raise ParseError("loss.alpha entries must be finite and >= 0")
        H, W = self.image_size
        stride = 2**N_LEVELS
        if H % stride or W % stride:
            raise ParseError(f"image_size must be divisible by {stride}")
        if any(c < 2 for c in self.point_channels) or any(c < 1 for c in self.image_channels):
            raise ParseError("channel counts too small")
        if self.knn < 1:
            raise ParseError("knn must be >= 1")

    @property
    def cylindrical_config(self) -> CylindricalConfig:
        return self.cylindrical.build()

    def level_image_shape(self, level: int) -> Tuple[int, int]:
        s = 2 ** (level + 1)
        return self.image_size[0] // s, self.image_size[1] // s

    def region_grid(self, level: int) -> Tuple[int, int]:
        """Number of region tiles (rows, cols) on the level's image feature map."""
        h, w = self.level_image_shape(level)
        rh, rw = self.region_size
        return max(1, -(-h // rh)), max(1, -(-w // rw))

    # profiles

    @classmethod
    def full(cls) -> "PipelineConfig":
        return cls()

    @classmethod
    def micro(cls) -> "PipelineConfig":
        return cls(
            cylindrical=CylindricalSection(width=1024, height=32, fov_up_deg=15.0, fov_down_deg=-15.0),
            image_size=(96, 320),
            image_channels=(4, 8, 16, 32),
            point_channels=(8, 16, 32, 64),
            region_size=(12, 20),
            knn=4,
        )

    # serialization

    def to_dict(self) -> Dict[str, Any]:
        def conv(v):
            if dataclasses.is_dataclass(v):
                return {f.name: conv(getattr(v, f.name)) for f in dataclasses.fields(v)}
            if isinstance(v, tuple):
                return list(v)
            return v

        return conv(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PipelineConfig":
        return _build(cls, data, "")

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ParseError(f"{path}: top level must be a mapping")
        profile = data.pop("profile", "full")
        if profile not in ("full", "micro"):
            raise ParseError(f"{path}: unknown profile {profile!r}")
        base = getattr(cls, profile)().to_dict()
        _merge(base, data, "")
        return cls.from_dict(base)


def _merge(base: Dict[str, Any], over: Dict[str, Any], where: str) -> None:
    for k, v in over.items():
        if k not in base:
            raise ParseError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ParseError(f"config key {where}{k} must be a mapping")
            _merge(base[k], v, f"{where}{k}.")
        else:
            base[k] = v


def _build(cls, data: Dict[str, Any], where: str):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ParseError(f"unknown config key(s) {sorted(unknown)} in {where or 'top level'}")
    kwargs = {}
    defaults = cls()
    for name, f in known.items():
        if name not in data:
            continue
        v = data[name]
        current = getattr(defaults, name)
        if dataclasses.is_dataclass(current):
            if not isinstance(v, dict):
                raise ParseError(f"config key {where}{name} must be a mapping")
            v = _build(type(current), v, f"{where}{name}.")
        elif isinstance(current, tuple):
            v = tuple(v)
        kwargs[name] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ParseError(str(exc)) from None
