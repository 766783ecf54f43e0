"""Joint point-cloud fusion and sensor dropout."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .config import DROPOUT_LOCATIONS, ConfigError
from .features import append_modality_code

CAMERA, RADAR = 0, 1


@dataclass(frozen=True)
class FusedCloud:
    points: np.ndarray    # (N, 3)
    features: np.ndarray  # (N, d + 2), last two entries are the modality code
    source: np.ndarray    # (N,) CAMERA or RADAR

    def __post_init__(self):
        n = len(self.points)
        if len(self.features) != n or len(self.source) != n:
            raise ValueError("points, features and source must be row-aligned")

    @property
    def d(self) -> int:
        return self.features.shape[1] - 2

    def __len__(self):
        return len(self.points)

    def subset(self, mask) -> "FusedCloud":
        return FusedCloud(self.points[mask], self.features[mask], self.source[mask])


def fuse(camera_points, camera_feats, radar_points, radar_feats, modality_code: bool = True) -> FusedCloud:
    """Stack camera rows then radar rows, each with its modality code.

    With ``modality_code`` off the two code entries are present but zero.
    """
    cp = np.asarray(camera_points, dtype=np.float64).reshape(-1, 3)
    rp = np.asarray(radar_points, dtype=np.float64).reshape(-1, 3)
    cf = np.asarray(camera_feats, dtype=np.float64)
    rf = np.asarray(radar_feats, dtype=np.float64)
    if len(cf) == 0:
        cf = cf.reshape(0, rf.shape[-1] if rf.ndim == 2 else 0)
    if len(rf) == 0:
        rf = rf.reshape(0, cf.shape[-1])
    if cf.shape[1] != rf.shape[1]:
        raise ValueError(f"feature dims differ: camera {cf.shape[1]}, radar {rf.shape[1]}")
    if len(cf) != len(cp) or len(rf) != len(rp):
        raise ValueError("points and features must have equal row counts")
    feats = np.concatenate([append_modality_code(cf, "camera"), append_modality_code(rf, "radar")])
    if not modality_code:
        feats[:, -2:] = 0.0
    source = np.concatenate([np.full(len(cp), CAMERA, np.int8), np.full(len(rp), RADAR, np.int8)])
    return FusedCloud(np.concatenate([cp, rp]), feats, source)


@dataclass(frozen=True)
class DropoutDecision:
    r1: float
    r2: float
    dropped: str  # "none" | "camera" | "radar"

    @classmethod
    def from_draws(cls, r1: float, r2: float, p_drop: float) -> "DropoutDecision":
        if r1 >= p_drop:
            return cls(r1, r2, "none")
        return cls(r1, r2, "camera" if r2 >= 0.5 else "radar")


def draw_dropout(p_drop: float, seed) -> DropoutDecision:
    if not 0.0 <= p_drop < 1.0:
        raise ConfigError(f"p_drop must lie in [0, 1), got {p_drop}")
    r1, r2 = np.random.default_rng(seed).random(2)
    return DropoutDecision.from_draws(float(r1), float(r2), p_drop)


def apply_dropout(cloud: FusedCloud, decision: DropoutDecision, location: str, p_drop: float, seed=None) -> FusedCloud:
    """Cloud-level effect of a dropout decision.

    point_feature zeroes the d feature entries of the dropped modality and
    keeps its code and positions; point_cloud removes its rows; input leaves
    the cloud alone (the image was zeroed before stage 1); normal zeroes each
    row's features independently with probability ``p_drop``. Nothing
    happens when the decision's r1 >= ``p_drop``.
    """
    if location not in DROPOUT_LOCATIONS:
        raise ConfigError(f"unknown dropout location {location!r}")
    if decision.r1 >= p_drop:
        return cloud
    if location == "normal":
        rng = np.random.default_rng([0 if seed is None else seed, 7])
        hit = rng.random(len(cloud)) < p_drop
        feats = cloud.features.copy()
        feats[hit, :-2] = 0.0
        return replace(cloud, features=feats)
    if location == "input":
        return cloud
    which = CAMERA if decision.dropped == "camera" else RADAR
    rows = cloud.source == which
    if location == "point_cloud":
        return cloud.subset(~rows)
    feats = cloud.features.copy()
    feats[rows, :-2] = 0.0
    return replace(cloud, features=feats)


def sensor_dropout(cloud: FusedCloud, p_drop: float, seed, location: str = "point_feature"):
    """Draw (r1, r2) from ``seed`` and apply; returns (cloud, decision)."""
    if location not in DROPOUT_LOCATIONS:
        raise ConfigError(f"unknown dropout location {location!r}")
    decision = draw_dropout(p_drop, seed)
    return apply_dropout(cloud, decision, location, p_drop, seed), decision


def drop_inputs(camera_image, radar_rf, decision: DropoutDecision):
    """Input-location dropout: zero the dropped modality's raw image."""
    if decision.dropped == "camera":
        camera_image = np.zeros_like(camera_image)
    elif decision.dropped == "radar":
        radar_rf = np.zeros_like(radar_rf)
    return camera_image, radar_rf
