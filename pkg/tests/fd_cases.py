"""Seeded finite-difference instances for every loss.

Each builder takes a seed and returns ``(f, x, tol)`` where ``f(x)``
returns ``(value, grad)`` with ``grad`` shaped like ``x``.
"""

import numpy as np

from cramfuse.geometry import Box3D
from cramfuse.losses import (
    depth_l2_loss,
    heading_bin_loss,
    heading_targets,
    heatmap_focal_loss,
    iou_surrogate_loss,
    seg_focal_loss,
    smooth_l1,
    total_loss,
)

TOL = 1e-4
TOL_IOU = 1e-3
KINK_MARGIN = 1e-3


def seg_case(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    labels = rng.random(n) < 0.4
    return (lambda p: seg_focal_loss(p, labels)), rng.uniform(0.02, 0.98, n), TOL


def depth_case(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    gt = rng.uniform(1, 60, n)
    mask = rng.random(n) < 0.7
    mask[0] = True
    return (lambda p: depth_l2_loss(p, gt, mask)), gt + rng.normal(0, 3, n), TOL


def heatmap_case(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 30))
    h = np.where(rng.random(n) < 0.3, rng.uniform(0.85, 1.0, n), rng.uniform(0.0, 0.6, n))
    return (lambda p: heatmap_focal_loss(p, h)), rng.uniform(0.02, 0.98, n), TOL


def _off_kink(e, beta=1.0):
    return np.all(np.abs(np.abs(e) - beta) > KINK_MARGIN)


def smooth_l1_case(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 6)), 7)
    gt = rng.normal(0, 1, shape)
    while True:
        x = gt + rng.normal(0, 1.5, shape)
        if _off_kink(x - gt) and np.all(np.abs(x - gt) > KINK_MARGIN):
            return (lambda p: smooth_l1(p, gt)), x, TOL


def bin_case(seed):
    rng = np.random.default_rng(seed)
    theta = rng.uniform(-np.pi, np.pi)
    _, r_t = heading_targets(theta)
    while True:
        x = np.r_[rng.normal(0, 2, 12), rng.uniform(-1.5, 1.5)]
        if _off_kink(x[12] - r_t):
            break

    def f(z):
        v, (gl, gr) = heading_bin_loss(z[:12], z[12], theta)
        return v, np.r_[gl, gr]

    return f, x, TOL


def iou_case(seed):
    """Overlapping pairs with every edge at least KINK_MARGIN from a kink."""
    rng = np.random.default_rng(seed)
    while True:
        gt = Box3D([*rng.uniform(-3, 3, 2), 0], [*rng.uniform(1, 5, 2), 1.5], rng.uniform(-np.pi, np.pi))
        x = np.r_[gt.center[:2] + rng.uniform(-1.5, 1.5, 2), rng.uniform(1, 5, 2)]
        c, s = np.cos(gt.heading), np.sin(gt.heading)
        d = x[:2] - gt.center[:2]
        u, v = c * d[0] + s * d[1], -s * d[0] + c * d[1]
        edges = np.array([u + x[2] / 2, u - x[2] / 2, v + x[3] / 2, v - x[3] / 2])
        bounds = np.array([gt.size[0], gt.size[0], gt.size[1], gt.size[1]]) / 2
        # distance from each predicted edge to the nearer ground-truth edge
        gaps = np.abs(np.abs(edges) - bounds)
        if gaps.min() > KINK_MARGIN and 0.0 < iou_surrogate_loss(x, gt)[0] < 1.0:
            return (lambda p: iou_surrogate_loss(p, gt)), x, TOL_IOU


def composite_case(seed):
    """Weighted composite of every term over one shared parameter vector."""
    rng = np.random.default_rng(seed)
    n = 6
    labels = rng.random(n) < 0.5
    dgt = rng.uniform(1, 10, n)
    mask = np.ones(n, bool)
    hgt = np.where(rng.random(n) < 0.3, 0.95, rng.uniform(0, 0.5, n))
    sgt = rng.normal(0, 1, (1, n))
    x0 = rng.uniform(0.1, 0.9, n)

    def f(x):
        parts = {
            "seg": (seg_focal_loss(x, labels)[0], {"x": seg_focal_loss(x, labels)[1]}),
            "depth": (depth_l2_loss(5 * x, dgt, mask)[0], {"x": 5 * depth_l2_loss(5 * x, dgt, mask)[1]}),
            "hm": (heatmap_focal_loss(x, hgt)[0], {"x": heatmap_focal_loss(x, hgt)[1]}),
            "box_smooth_l1": (smooth_l1(x[None] * 3, sgt)[0], {"x": 3 * smooth_l1(x[None] * 3, sgt)[1][0]}),
        }
        rep = total_loss(parts)
        return rep.total, rep.gradients["x"]

    while not _off_kink(3 * x0 - sgt[0]):
        x0 = rng.uniform(0.1, 0.9, n)
    return f, x0, TOL


CASES = {
    "seg_focal": seg_case,
    "depth_l2": depth_case,
    "heatmap_focal": heatmap_case,
    "smooth_l1": smooth_l1_case,
    "heading_bin": bin_case,
    "iou_surrogate": iou_case,
    "composite": composite_case,
}
