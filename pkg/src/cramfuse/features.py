"""Handcrafted 2D features, foreground scoring and depth prediction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter

from .config import ConfigError
from .learner import TinyHead, head_forward

MIN_DEPTH = 0.5
CAMERA_CODE = np.array([1.0, 0.0])
RADAR_CODE = np.array([0.0, 1.0])


@dataclass(frozen=True)
class FeatureMap:
    grid: np.ndarray  # H x W x d

    @property
    def d(self) -> int:
        return self.grid.shape[-1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape[:2]

    def flat(self) -> np.ndarray:
        return self.grid.reshape(-1, self.d)


def smoothing_sizes(n: int) -> list[int]:
    """Odd box widths growing geometrically from 5."""
    sizes = []
    for k in range(1, n + 1):
        w = int(round(3 * 1.4**k))
        sizes.append(w | 1)
    return sizes


def _central_diff(img: np.ndarray, axis: int) -> np.ndarray:
    pad = [(0, 0), (0, 0)]
    pad[axis] = (1, 1)
    p = np.pad(img, pad, mode="edge")
    if axis == 1:
        return 0.5 * (p[:, 2:] - p[:, :-2])
    return 0.5 * (p[2:, :] - p[:-2, :])


def extract_features(image, d: int = 16) -> FeatureMap:
    """Deterministic per-pixel feature stack for a [0, 1] intensity image.

    Channels: intensity, horizontal and vertical central differences,
    3x3 mean, 3x3 variance, then box-filtered copies (each box applied twice)
    at growing widths. Every channel is mapped to [-1, 1] by a fixed affine
    map of its attainable range, so constant inputs give zero gradients.
    """
    if d < 4:
        raise ConfigError(f"feature dim must be >= 4, got {d}")
    img = np.asarray(image, dtype=np.float64)
    mean3 = uniform_filter(img, size=3, mode="nearest")
    var3 = np.clip(uniform_filter(img * img, size=3, mode="nearest") - mean3**2, 0.0, 0.25)
    chans = [
        2.0 * img - 1.0,
        2.0 * _central_diff(img, 1),
        2.0 * _central_diff(img, 0),
        2.0 * mean3 - 1.0,
        8.0 * var3 - 1.0,
    ]
    for w in smoothing_sizes(max(d - len(chans), 0)):
        smooth = uniform_filter(uniform_filter(img, size=w, mode="nearest"), size=w, mode="nearest")
        chans.append(2.0 * smooth - 1.0)
    grid = np.stack(chans[:d], axis=-1)
    return FeatureMap(np.clip(grid, -1.0, 1.0))


def _apply(fm: FeatureMap, head: TinyHead) -> np.ndarray:
    if head.in_dim != fm.d:
        raise ValueError(f"head expects {head.in_dim} inputs, feature map has {fm.d}")
    if head.out_dim != 1:
        raise ValueError("head must produce a single output")
    return head_forward(head, fm.flat())[:, 0].reshape(fm.shape)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def score_foreground(fm: FeatureMap, head: TinyHead) -> np.ndarray:
    """Per-pixel foreground probability, sigmoid of the head output."""
    return sigmoid(_apply(fm, head))


def predict_depth(fm: FeatureMap, head: TinyHead) -> np.ndarray:
    """softplus(head) + 0.5 m, positive everywhere."""
    return softplus(_apply(fm, head)) + MIN_DEPTH


def select_foreground(scores, tau: float) -> np.ndarray:
    """(row, col) of pixels scoring strictly above ``tau``, row-major."""
    rows, cols = np.nonzero(np.asarray(scores) > tau)
    return np.stack([rows, cols], axis=-1)


def append_modality_code(features, modality: str) -> np.ndarray:
    if modality == "camera":
        code = CAMERA_CODE
    elif modality == "radar":
        code = RADAR_CODE
    else:
        raise ValueError(f"unknown modality {modality!r}")
    f = np.asarray(features, dtype=np.float64)
    if f.ndim == 1:
        return np.concatenate([f, code])
    return np.concatenate([f, np.broadcast_to(code, (len(f), 2))], axis=-1)
