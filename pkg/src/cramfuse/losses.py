"""Training objectives with closed-form gradients.

Every loss returns ``(value, grad)`` where ``grad`` has the shape of the
differentiated input (a tuple of arrays when there are several inputs).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .geometry import Box3D, normalize_angle

P_CLAMP = 1e-7


def _clamp(p):
    p = np.asarray(p, dtype=np.float64)
    pc = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    return pc, (p > P_CLAMP) & (p < 1.0 - P_CLAMP)


def seg_focal_loss(p, labels, gamma_s: float = 2.0):
    """Pixel-wise focal loss averaged over all N pixels.

    ``labels`` is truthy for foreground. Gradient is w.r.t. ``p`` and is
    zero where the clamp is active.
    """
    p, free = _clamp(p)
    fg = np.asarray(labels, dtype=bool)
    n = max(p.size, 1)
    g = gamma_s
    lp, l1p = np.log(p), np.log1p(-p)
    pos = (1 - p) ** g * lp
    neg = p ** g * l1p
    value = -(np.sum(pos[fg]) + np.sum(neg[~fg])) / n
    dpos = -g * (1 - p) ** (g - 1) * lp + (1 - p) ** g / p
    dneg = g * p ** (g - 1) * l1p - p ** g / (1 - p)
    grad = -np.where(fg, dpos, dneg) / n
    return float(value), np.where(free, grad, 0.0)


def depth_l2_loss(pred, gt, valid_mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    valid = np.asarray(valid_mask, dtype=bool)
    if pred.shape != gt.shape or pred.shape != valid.shape:
        raise ValueError("pred, gt and mask shapes must agree")
    n = int(valid.sum())
    if n == 0:
        return 0.0, np.zeros_like(pred)
    err = np.where(valid, pred - gt, 0.0)
    return float(np.sum(err * err) / n), 2.0 * err / n


def heatmap_focal_loss(h_pred, h_gt, alpha_h: float = 4.0, gamma_h: float = 2.0, epsilon_h: float = 0.2):
    """Objectness focal loss; positives are points with h_gt > 1 - epsilon_h."""
    hp, free = _clamp(h_pred)
    h = np.asarray(h_gt, dtype=np.float64)
    n = max(hp.size, 1)
    pos = h > 1.0 - epsilon_h
    g = gamma_h
    lp, l1p = np.log(hp), np.log1p(-hp)
    wneg = (1.0 - h) ** alpha_h
    value = -(np.sum(((1 - hp) ** g * lp)[pos]) + np.sum((wneg * hp ** g * l1p)[~pos])) / n
    dpos = -g * (1 - hp) ** (g - 1) * lp + (1 - hp) ** g / hp
    dneg = wneg * (g * hp ** (g - 1) * l1p - hp ** g / (1 - hp))
    grad = -np.where(pos, dpos, dneg) / n
    return float(value), np.where(free, grad, 0.0)


def smooth_l1(pred, gt, beta: float = 1.0):
    """Elementwise smooth-L1 summed per box, averaged over boxes (rows)."""
    pred = np.asarray(pred, dtype=np.float64)
    e = pred - np.asarray(gt, dtype=np.float64)
    nbox = pred.shape[0] if pred.ndim >= 2 else 1
    small = np.abs(e) < beta
    val = np.where(small, 0.5 * e * e / beta, np.abs(e) - 0.5 * beta)
    grad = np.where(small, e / beta, np.sign(e))
    return float(np.sum(val) / nbox), grad / nbox


def heading_targets(theta, num_bins: int = 12):
    """Bin index and residual (in half-bin units) of heading(s)."""
    theta = normalize_angle(theta)
    width = 2 * np.pi / num_bins
    b = np.floor((np.asarray(theta) + np.pi) / width).astype(np.int64)
    b = np.clip(b, 0, num_bins - 1)
    center = -np.pi + (b + 0.5) * width
    return b, (np.asarray(theta) - center) / (width / 2)


def heading_bin_loss(bin_logits, residual_pred, theta_gt, num_bins: int = 12):
    """Cross-entropy over heading bins plus smooth-L1 on the in-bin residual.

    Accepts one box (logits of shape (num_bins,)) or a batch (B, num_bins);
    batch values are averaged over boxes. Returns (value, (dlogits, dresidual)).
    """
    logits = np.asarray(bin_logits, dtype=np.float64)
    single = logits.ndim == 1
    logits = np.atleast_2d(logits)
    res = np.atleast_1d(np.asarray(residual_pred, dtype=np.float64))
    nb = len(logits)
    b, r_t = heading_targets(np.atleast_1d(theta_gt), num_bins)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    ce = -logp[np.arange(nb), b]
    dlog = np.exp(logp)
    dlog[np.arange(nb), b] -= 1.0
    e = res - r_t
    small = np.abs(e) < 1.0
    sl = np.where(small, 0.5 * e * e, np.abs(e) - 0.5)
    dres = np.where(small, e, np.sign(e))
    value = float(np.sum(ce + sl) / nb)
    dlog, dres = dlog / nb, dres / nb
    if single:
        return value, (dlog[0], dres[0] if np.ndim(residual_pred) == 0 else dres)
    return value, (dlog, dres)


def iou_surrogate_loss(pred_box, gt_box):
    """1 - IoU of axis-aligned footprints in the ground-truth heading frame.

    ``pred_box`` = (x, y, l, w); ``gt_box`` = (x, y, l, w, theta) or a Box3D.
    The predicted footprint is taken axis-aligned in that frame. Gradient is
    w.r.t. (x, y, l, w); exact edge coincidences contribute 0.
    """
    if isinstance(gt_box, Box3D):
        gx, gy, gl, gw, th = gt_box.center[0], gt_box.center[1], gt_box.size[0], gt_box.size[1], gt_box.heading
    else:
        gx, gy, gl, gw, th = [float(v) for v in gt_box]
    x, y, l, w = [float(v) for v in pred_box]
    c, s = np.cos(th), np.sin(th)
    u = c * (x - gx) + s * (y - gy)
    v = -s * (x - gx) + c * (y - gy)

    def overlap(center, size, gsize):
        hi_p, lo_p = center + size / 2, center - size / 2
        o = min(hi_p, gsize / 2) - max(lo_p, -gsize / 2)
        if o <= 0:
            return 0.0, 0.0, 0.0
        a = 1.0 if hi_p < gsize / 2 else 0.0
        b = 1.0 if lo_p > -gsize / 2 else 0.0
        return o, a - b, 0.5 * (a + b)

    ox, dox_du, dox_dl = overlap(u, l, gl)
    oy, doy_dv, doy_dw = overlap(v, w, gw)
    inter = ox * oy
    union = l * w + gl * gw - inter
    iou = inter / union
    di_du, di_dv = dox_du * oy, ox * doy_dv
    di_dl, di_dw = dox_dl * oy, ox * doy_dw
    du_dl, du_dw = w - di_dl, l - di_dw

    def d_iou(dinter, dunion):
        return (dinter * union - inter * dunion) / union**2

    g_u = d_iou(di_du, -di_du)
    g_v = d_iou(di_dv, -di_dv)
    g_l = d_iou(di_dl, du_dl)
    g_w = d_iou(di_dw, du_dw)
    # (u, v) = R(-theta) (x - gx, y - gy)
    g_x = c * g_u - s * g_v
    g_y = s * g_u + c * g_v
    return float(1.0 - iou), -np.array([g_x, g_y, g_l, g_w])


@dataclass
class HeatmapTarget:
    values: np.ndarray
    sigma: float
    boxes: list
    assignment: np.ndarray  # index of the box attaining the max, -1 if none


def heatmap_gt(points, boxes, sigma: float = 1.0, bev: bool = False) -> HeatmapTarget:
    """h(x) = max over boxes containing x of exp(-(|x - c| - |x_c - c|) / sigma^2).

    x_c is the contained point closest to the box center c; points inside no
    box get 0. With ``bev`` set, containment and distances use x, y only.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    values = np.zeros(len(pts))
    assign = np.full(len(pts), -1, dtype=np.int64)
    k = 2 if bev else 3
    for j, box in enumerate(boxes):
        inside = box.contains(pts, bev=bev)
        if not inside.any():
            continue
        dist = np.linalg.norm(pts[inside, :k] - box.center[:k], axis=1)
        h = np.exp(-(dist - dist.min()) / sigma**2)
        idx = np.nonzero(inside)[0]
        better = h > values[idx]
        values[idx[better]] = h[better]
        assign[idx[better]] = j
    return HeatmapTarget(values, sigma, list(boxes), assign)


@dataclass
class BoxLoss:
    smooth_l1: float = 0.0
    bin: float = 0.0
    iou: float = 0.0
    grad: np.ndarray | None = None  # w.r.t. raw box params (V, 7 + bins)
    count: int = 0

    @property
    def value(self) -> float:
        return self.smooth_l1 + self.bin + self.iou


def box_regression_loss(params, voxel_centers, target: HeatmapTarget, tau_hm: float = 0.2, num_bins: int = 12) -> BoxLoss:
    """Box loss over voxels whose ground-truth heatmap exceeds ``tau_hm``.

    ``params`` rows are (dx, dy, dz, log l, log w, log h, bin logits, residual).
    Every selected voxel regresses its assigned box; the three terms are
    averaged over the B selected voxels.
    """
    params = np.asarray(params, dtype=np.float64)
    grad = np.zeros_like(params)
    sel = np.nonzero((target.values > tau_hm) & (target.assignment >= 0))[0]
    if len(sel) == 0:
        return BoxLoss(grad=grad)
    boxes = [target.boxes[j] for j in target.assignment[sel]]
    nb = len(sel)
    p = params[sel]
    centers = np.asarray(voxel_centers, dtype=np.float64)[sel]
    reg_t = np.array([np.r_[b.center - c, np.log(b.size)] for b, c in zip(boxes, centers)])
    v_sl, g_sl = smooth_l1(p[:, :6], reg_t)
    theta = np.array([b.heading for b in boxes])
    v_bin, (g_logit, g_res) = heading_bin_loss(p[:, 6:6 + num_bins], p[:, 6 + num_bins], theta, num_bins)
    v_iou = 0.0
    g_iou = np.zeros((nb, 4))
    for i, (b, c) in enumerate(zip(boxes, centers)):
        pred = (c[0] + p[i, 0], c[1] + p[i, 1], np.exp(p[i, 3]), np.exp(p[i, 4]))
        val, g = iou_surrogate_loss(pred, b)
        v_iou += val / nb
        g_iou[i] = g / nb
    g = np.zeros_like(p)
    g[:, :6] = g_sl
    g[:, 0] += g_iou[:, 0]
    g[:, 1] += g_iou[:, 1]
    g[:, 3] += g_iou[:, 2] * np.exp(p[:, 3])
    g[:, 4] += g_iou[:, 3] * np.exp(p[:, 4])
    g[:, 6:6 + num_bins] += g_logit
    g[:, 6 + num_bins] += g_res
    grad[sel] = g
    return BoxLoss(v_sl, v_bin, v_iou, grad, nb)


@dataclass
class LossReport:
    seg: float
    depth: float
    hm: float
    box_smooth_l1: float
    box_bin: float
    box_iou: float
    total: float
    gradients: dict = field(default_factory=dict)

    @property
    def box(self) -> float:
        return self.box_smooth_l1 + self.box_bin + self.box_iou


BOX_TERMS = ("box_smooth_l1", "box_bin", "box_iou")


def total_loss(parts: dict, weights=(400.0, 20.0, 4.0)) -> LossReport:
    """lambda_seg*seg + lambda_depth*depth + lambda_hm*hm + box.

    ``parts`` maps names to a float or a ``(value, grads)`` pair, ``grads``
    being a dict of arrays. Names are "seg", "depth", "hm" and either the
    three box terms or a single "box" (float, pair, or BoxLoss, whose value
    is then reported under box_smooth_l1 unless it is a BoxLoss). Gradients
    are combined with the same weights as the values; a gradient entry may
    be an array or a list of arrays (one per head parameter).
    """
    lam = dict(zip(("seg", "depth", "hm"), weights), **{k: 1.0 for k in BOX_TERMS})
    parts = dict(parts)
    box = parts.pop("box", None)
    if isinstance(box, BoxLoss):
        parts.update(box_smooth_l1=box.smooth_l1, box_bin=box.bin, box_iou=box.iou)
    elif box is not None:
        parts["box_smooth_l1"] = box
    values, grads = {}, {}
    for name, part in parts.items():
        if name not in lam:
            raise KeyError(f"unknown loss part {name!r}")
        v, g = part if isinstance(part, tuple) else (part, {})
        v = float(v)
        if not np.isfinite(v):
            raise FloatingPointError(f"loss part {name!r} is not finite")
        values[name] = v
        for key, arr in g.items():
            if isinstance(arr, (list, tuple)):
                scaled = [lam[name] * np.asarray(a, dtype=np.float64) for a in arr]
                grads[key] = [a + b for a, b in zip(grads[key], scaled)] if key in grads else scaled
            else:
                grads[key] = grads.get(key, 0.0) + lam[name] * np.asarray(arr, dtype=np.float64)
    total = sum(lam[k] * values.get(k, 0.0) for k in lam)
    return LossReport(*(values.get(k, 0.0) for k in ("seg", "depth", "hm") + BOX_TERMS), float(total), grads)


def finite_diff_check(f: Callable, x, h: float = 1e-5) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(x)`` returns (value, grad) with grad shaped like x. The relative error
    uses max(|analytic|, |numeric|, 1e-8) as denominator.
    """
    x = np.array(x, dtype=np.float64)
    _, g = f(x.copy())
    g = np.asarray(g, dtype=np.float64).reshape(x.shape)
    worst = 0.0
    flat = x.reshape(-1)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += h
        xm[i] -= h
        num = (f(xp.reshape(x.shape))[0] - f(xm.reshape(x.shape))[0]) / (2 * h)
        ana = g.reshape(-1)[i]
        err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
        worst = max(worst, err)
    return worst
