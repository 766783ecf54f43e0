"""Ray-constrained cross-attention.

Each foreground camera pixel proposes 2s+1 candidate 3D locations along its
viewing ray around the estimated depth. Radar features gathered at the
candidates act as keys for the pixel's camera feature (the query); the
softmax weights then average the candidate locations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import PipelineConfig
from .features import FeatureMap
from .geometry import CameraModel, PixelRay, RadarModel, pixel_to_ray

MIN_SAMPLE_DEPTH = 0.1


@dataclass(frozen=True)
class RaySamples:
    locations: np.ndarray  # (2s+1, 3)
    depths: np.ndarray     # (2s+1,) distance along the ray
    s: int
    epsilon: float
    origin: np.ndarray
    direction: np.ndarray
    d_est: float


@dataclass(frozen=True)
class AttentionResult:
    location: np.ndarray
    weights: np.ndarray
    depth: float


def sample_depths(d_est, s: int, epsilon: float) -> np.ndarray:
    """d_est * (1 + epsilon * k) for k = -s..s, clamped to 0.1 m; shape (..., 2s+1)."""
    k = np.arange(-s, s + 1, dtype=np.float64)
    d = np.asarray(d_est, dtype=np.float64)[..., None] * (1.0 + epsilon * k)
    return np.maximum(d, MIN_SAMPLE_DEPTH)


def sample_along_ray(ray: PixelRay, d_est: float, s: int = 1, epsilon: float = 0.1) -> RaySamples:
    if d_est <= 0:
        raise ValueError("depth estimate must be positive")
    if s < 0 or epsilon <= 0:
        raise ValueError("need s >= 0 and epsilon > 0")
    depths = sample_depths(d_est, s, epsilon)
    direction = np.asarray(ray.direction, dtype=np.float64)
    locations = ray.origin + depths[:, None] * direction
    return RaySamples(locations, depths, s, epsilon, np.asarray(ray.origin, dtype=np.float64), direction, float(d_est))


def nearest_cells(radar: RadarModel, xy: np.ndarray):
    """Nearest radar cell (row, col) for BEV points and an inside-extent mask.

    Points exactly between two cell centers go to the smaller index.
    """
    x0, x1, y0, y1 = radar.extent
    rows, cols = radar.shape
    x, y = xy[..., 0], xy[..., 1]
    inside = (x >= x0) & (x <= x1) & (y >= y0) & (y <= y1)
    r = np.clip(np.ceil((x - x0) / radar.cell_size) - 1, 0, rows - 1)
    c = np.clip(np.ceil((y - y0) / radar.cell_size) - 1, 0, cols - 1)
    r = np.where(inside, r, 0).astype(np.int64)
    c = np.where(inside, c, 0).astype(np.int64)
    return r, c, inside


def gather_radar_features(samples, radar_fm: FeatureMap | None, radar: RadarModel, d: int | None = None) -> np.ndarray:
    """Feature of the BEV-nearest radar cell for each sample location.

    ``samples`` may be a RaySamples or an array of locations (..., 3).
    Locations outside the radar extent, or a missing feature map, yield
    zero vectors.
    """
    locs = samples.locations if isinstance(samples, RaySamples) else np.asarray(samples, dtype=np.float64)
    if radar_fm is None:
        return np.zeros(locs.shape[:-1] + (d or 1,))
    if radar_fm.shape != radar.shape:
        raise ValueError(f"radar feature map {radar_fm.shape} does not match grid {radar.shape}")
    r, c, inside = nearest_cells(radar, locs[..., :2])
    feats = radar_fm.grid[r, c]
    return np.where(inside[..., None], feats, 0.0)


def softmax_weights(psi_c, psi_r) -> np.ndarray:
    """softmax(psi_c . psi_r^T / sqrt(d)) over the last axis, max-subtracted.

    psi_c: (..., d); psi_r: (..., K, d).
    """
    psi_c = np.asarray(psi_c, dtype=np.float64)
    psi_r = np.asarray(psi_r, dtype=np.float64)
    d = psi_c.shape[-1]
    if d == 0 or psi_r.shape[-1] != d:
        raise ValueError(f"query dim {d} does not match key dim {psi_r.shape[-1]}")
    logits = np.einsum("...d,...kd->...k", psi_c, psi_r) / np.sqrt(d)
    logits = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=-1, keepdims=True)


def attended_depth(weights: np.ndarray, d_est, depths: np.ndarray, s: int, epsilon: float) -> np.ndarray:
    """Weighted sample depth.

    Without clamping the samples are d_est(1 + eps k), so the weighted mean
    is d_est(1 + eps * sum_k k (w_k - w_-k)); pairing symmetric weights
    makes a symmetric weight vector return d_est exactly.
    """
    d_est = np.asarray(d_est, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    rel = np.zeros(w.shape[:-1])
    for k in range(1, s + 1):
        rel = rel + k * (w[..., s + k] - w[..., s - k])
    exact = d_est * (1.0 + epsilon * rel)
    clamped = d_est * (1.0 - epsilon * s) < MIN_SAMPLE_DEPTH
    if np.any(clamped):
        return np.where(clamped, np.sum(w * depths, axis=-1), exact)
    return exact


def cross_attend(psi_c, psi_r, samples: RaySamples) -> AttentionResult:
    psi_c = np.asarray(psi_c, dtype=np.float64).reshape(-1)
    psi_r = np.atleast_2d(np.asarray(psi_r, dtype=np.float64))
    if psi_r.shape[0] != len(samples.depths):
        raise ValueError("one key per sample required")
    w = softmax_weights(psi_c, psi_r)
    location = w @ samples.locations
    depth = float(attended_depth(w, samples.d_est, samples.depths, samples.s, samples.epsilon))
    return AttentionResult(location, w, depth)


@dataclass
class RefinedPoints:
    points: np.ndarray      # (N, 3) world
    features: np.ndarray    # (N, d) camera features of the pixels
    depth: np.ndarray       # (N,) camera-frame depth after refinement
    weights: np.ndarray     # (N, 2s+1)


def refine_camera_points(
    pixels,
    depth_map,
    camera_fm: FeatureMap,
    radar_fm: FeatureMap | None,
    cam: CameraModel,
    radar: RadarModel,
    config: PipelineConfig = PipelineConfig(),
) -> RefinedPoints:
    """Lift foreground pixels to 3D and snap them toward radar support.

    ``pixels`` are (row, col) indices; ``depth_map`` holds camera-frame
    depths. With ``config.attention`` off, or no radar features, points sit
    at the estimated depth (zero keys give uniform weights and the symmetric
    sample set averages back to the estimate).
    """
    pixels = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    d = camera_fm.d
    n, k = len(pixels), 2 * config.s + 1
    if n == 0:
        return RefinedPoints(np.zeros((0, 3)), np.zeros((0, d)), np.zeros(0), np.zeros((0, k)))
    rows, cols = pixels[:, 0], pixels[:, 1]
    px = np.stack([cols + 0.5, rows + 0.5], axis=-1).astype(np.float64)
    ray = pixel_to_ray(cam, px)
    cos = ray.direction @ cam.extrinsics.rotation[:, 2]
    depth_cam = np.asarray(depth_map, dtype=np.float64)[rows, cols]
    rng_est = depth_cam / cos
    feats = camera_fm.grid[rows, cols]
    if not config.attention or radar_fm is None:
        weights = np.full((n, k), 1.0 / k)
        points = ray.origin + rng_est[:, None] * ray.direction
        return RefinedPoints(points, feats, depth_cam, weights)
    depths = sample_depths(rng_est, config.s, config.epsilon)
    locs = ray.origin + depths[..., None] * ray.direction[:, None, :]
    keys = gather_radar_features(locs, radar_fm, radar)
    weights = softmax_weights(feats, keys)
    rng_att = attended_depth(weights, rng_est, depths, config.s, config.epsilon)
    points = ray.origin + rng_att[:, None] * ray.direction
    return RefinedPoints(points, feats, rng_att * cos, weights)
