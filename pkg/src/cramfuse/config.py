"""Shared hyperparameters for the fusion pipeline."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

DROPOUT_LOCATIONS = ("normal", "input", "point_cloud", "point_feature")


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


@dataclass(frozen=True)
class PipelineConfig:
    # stage 1
    tau: float = 0.15
    d: int = 16
    gamma_s: float = 2.0
    # ray-constrained attention
    s: int = 1
    epsilon: float = 0.10
    attention: bool = True
    # sensor dropout
    p_drop: float = 0.2
    dropout_location: str = "point_feature"
    modality_code: bool = True
    # loss weights and shapes
    lambda_seg: float = 400.0
    lambda_depth: float = 20.0
    lambda_hm: float = 4.0
    sigma_h: float = 1.0
    epsilon_h: float = 0.2
    tau_hm: float = 0.2
    gamma_h: float = 2.0
    alpha_h: float = 4.0
    # voxelization
    region_min: tuple[float, float, float] = (-100.0, -100.0, -5.0)
    region_max: tuple[float, float, float] = (100.0, 100.0, 5.0)
    voxel_size: float = 0.2
    voxel_mode: str = "pillar"
    neighbor_radii: tuple[int, ...] = (2, 6, 12)
    num_heading_bins: int = 12
    # decoding
    tau_score: float = 0.3
    nms_iou: float = 0.1
    max_out: int = 200
    min_depth: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.d < 4:
            raise ConfigError(f"feature dim d must be >= 4, got {self.d}")
        if self.s < 0:
            raise ConfigError("s must be >= 0")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if not 0.0 <= self.p_drop < 1.0:
            raise ConfigError(f"p_drop must lie in [0, 1), got {self.p_drop}")
        if self.dropout_location not in DROPOUT_LOCATIONS:
            raise ConfigError(f"unknown dropout location {self.dropout_location!r}")
        if self.voxel_mode not in ("pillar", "voxel3d"):
            raise ConfigError(f"unknown voxel mode {self.voxel_mode!r}")
        if self.voxel_size <= 0:
            raise ConfigError("voxel_size must be > 0")
        if self.num_heading_bins < 1:
            raise ConfigError("num_heading_bins must be >= 1")

    def replace(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, value in data.items():
            if key not in names:
                raise ConfigError(f"unknown pipeline key {key!r}")
            if isinstance(value, list):
                value = tuple(value)
            kwargs[key] = value
        return cls(**kwargs)


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 1000         # detection-head updates
    stage1_steps: int = 150   # segmentation/depth-head updates
    learning_rate: float = 0.02
    momentum: float = 0.9
    seed: int = 0
    batch: int = 2
    clip_norm: float = 1.0
    flip: bool = True
    max_rotation: float = 0.0
    hidden: int = 16

    def __post_init__(self):
        if self.steps < 0 or self.stage1_steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch < 1:
            raise ConfigError("batch must be >= 1")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)
