"""Box decoding from per-voxel head outputs and rotated NMS."""

from __future__ import annotations

import numpy as np

from .geometry import Box3D, normalize_angle
from .losses import heading_targets
from .metrics import rotated_bev_iou

__all__ = ["Box3D", "decode_heading", "encode_heading", "decode_boxes", "nms_rotated"]


def encode_heading(theta, num_bins: int = 12):
    return heading_targets(theta, num_bins)


def decode_heading(bin_logits, residual, num_bins: int | None = None) -> float:
    """Heading from bin logits (argmax, lowest index on ties) and residual."""
    logits = np.asarray(bin_logits, dtype=np.float64)
    n = num_bins or logits.shape[-1]
    b = np.argmax(logits, axis=-1)
    width = 2 * np.pi / n
    theta = -np.pi + (b + 0.5) * width + np.asarray(residual) * (width / 2)
    return normalize_angle(theta)


def decode_boxes(centers, heat, params, tau_score: float = 0.3, num_bins: int = 12, category: str = "vehicle"):
    """One box per cell whose heatmap score exceeds ``tau_score``.

    Rows of ``params``: (dx, dy, dz, log l, log w, log h, bin logits, residual).
    Boxes are returned in cell order.
    """
    if not 0.0 < tau_score < 1.0:
        raise ValueError("tau_score must lie in (0, 1)")
    heat = np.asarray(heat, dtype=np.float64)
    params = np.asarray(params, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    keep = np.nonzero(heat > tau_score)[0]
    if len(keep) == 0:
        return []
    p = params[keep]
    ctr = centers[keep] + p[:, :3]
    size = np.exp(p[:, 3:6])
    theta = decode_heading(p[:, 6:6 + num_bins], p[:, 6 + num_bins])
    theta = np.atleast_1d(theta)
    return [Box3D(ctr[i], size[i], theta[i], heat[keep[i]], category) for i in range(len(keep))]


def nms_rotated(boxes, iou_thresh: float = 0.1, max_out: int = 200):
    """Greedy NMS on rotated BEV IoU.

    Boxes are visited by descending score, ties in input order; a box is
    dropped when its IoU with any kept box exceeds ``iou_thresh``.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in (0, 1]")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: list[Box3D] = []
    for i in order:
        if len(kept) >= max_out:
            break
        b = boxes[i]
        if all(rotated_bev_iou(b, k) <= iou_thresh for k in kept):
            kept.append(b)
    return kept
