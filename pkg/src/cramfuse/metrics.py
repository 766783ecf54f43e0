"""Rotated BEV IoU and BEV average precision."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .geometry import Box3D

DEFAULT_BUCKETS = ((0.0, 30.0), (30.0, 50.0), (50.0, float("inf")))


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise order."""
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def clip_convex(subject: np.ndarray, clipper: np.ndarray) -> np.ndarray:
    """Sutherland-Hodgman clip of a convex polygon by a CCW convex clipper."""
    out = [tuple(p) for p in subject]
    n = len(clipper)
    for i in range(n):
        if not out:
            break
        a, b = clipper[i], clipper[(i + 1) % n]
        ex, ey = b[0] - a[0], b[1] - a[1]

        def side(p):
            return ex * (p[1] - a[1]) - ey * (p[0] - a[0])

        inp, out = out, []
        prev = inp[-1]
        s_prev = side(prev)
        for cur in inp:
            s_cur = side(cur)
            if s_cur >= 0:
                if s_prev < 0:
                    t = s_prev / (s_prev - s_cur)
                    out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
                out.append(cur)
            elif s_prev >= 0:
                t = s_prev / (s_prev - s_cur)
                out.append((prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])))
            prev, s_prev = cur, s_cur
    return np.array(out, dtype=np.float64).reshape(-1, 2)


def rotated_bev_iou(a: Box3D, b: Box3D) -> float:
    area_a = float(a.size[0] * a.size[1])
    area_b = float(b.size[0] * b.size[1])
    if area_a <= 0 or area_b <= 0:
        return 0.0
    # cheap reject on circumscribed circles
    ra = 0.5 * np.hypot(a.size[0], a.size[1])
    rb = 0.5 * np.hypot(b.size[0], b.size[1])
    if np.hypot(*(a.center[:2] - b.center[:2])) > ra + rb:
        return 0.0
    inter = polygon_area(clip_convex(a.bev_corners(), b.bev_corners()))
    inter = min(max(inter, 0.0), area_a, area_b)
    union = area_a + area_b - inter
    return float(inter / union) if union > 0 else 0.0


def iou_matrix(dets: Sequence[Box3D], gts: Sequence[Box3D]) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            out[i, j] = rotated_bev_iou(d, g)
    return out


@dataclass
class EvalResult:
    ap: dict = field(default_factory=dict)          # (category, iou_thresh, bucket) -> ap
    pr_curve: dict = field(default_factory=dict)    # same keys -> [(precision, recall), ...]
    matches: list = field(default_factory=list)     # per frame: [(det_idx, gt_idx), ...] at first threshold, bucket "all"


def average_precision(tp: np.ndarray, scores: np.ndarray, num_gt: int):
    """All-point interpolated AP from per-detection TP flags.

    Returns (ap, precision, recall) with detections ordered by descending
    score (stable on ties).
    """
    if num_gt == 0 or len(tp) == 0:
        return 0.0, np.zeros(0), np.zeros(0)
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / num_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    ap = float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))
    return ap, precision, recall


def match_frame(dets: Sequence[Box3D], gts: Sequence[Box3D], iou_thresh: float, ious=None):
    """Greedy score-ordered matching.

    Each detection, in descending score order (ties by input order),
    claims the unmatched ground truth with the highest IoU, provided that
    IoU >= iou_thresh. Returns per-detection TP flags in input order and the
    list of (det, gt) pairs.
    """
    if ious is None:
        ious = iou_matrix(dets, gts)
    tp = np.zeros(len(dets), dtype=bool)
    pairs = []
    taken = np.zeros(len(gts), dtype=bool)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    for i in order:
        if len(gts) == 0:
            break
        cand = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thresh:
            taken[j] = True
            tp[i] = True
            pairs.append((i, j))
    return tp, pairs


def _bucket_of(box: Box3D, bucket) -> bool:
    r = float(np.hypot(box.center[0], box.center[1]))
    return bucket[0] <= r < bucket[1]


def bev_ap(
    dets: Sequence[Sequence[Box3D]],
    gts: Sequence[Sequence[Box3D]],
    iou_thresh=0.5,
    range_buckets=DEFAULT_BUCKETS,
) -> EvalResult:
    """BEV AP over a set of frames.

    ``dets`` and ``gts`` are per-frame lists. ``iou_thresh`` may be a single
    value or a sequence. Buckets partition both detections and ground truth
    by BEV center range; the key "all" covers every box.
    """
    if len(dets) != len(gts):
        raise ValueError("dets and gts must have one entry per frame")
    thresholds = (iou_thresh,) if np.isscalar(iou_thresh) else tuple(iou_thresh)
    for t in thresholds:
        if not 0.0 < t <= 1.0:
            raise ValueError(f"IoU threshold must lie in (0, 1], got {t}")
    buckets = [("all", (0.0, float("inf")))] + [
        (f"{lo:g}-{hi:g}", (lo, hi)) for lo, hi in range_buckets
    ]
    categories = sorted({b.category for frame in gts for b in frame} | {b.category for frame in dets for b in frame})
    result = EvalResult()
    all_ious = [iou_matrix(d, g) for d, g in zip(dets, gts)]
    for cat in categories:
        for t in thresholds:
            for name, bucket in buckets:
                tps, scores, num_gt = [], [], 0
                for f, (fd, fg) in enumerate(zip(dets, gts)):
                    di = [i for i, b in enumerate(fd) if b.category == cat and _bucket_of(b, bucket)]
                    gi = [j for j, b in enumerate(fg) if b.category == cat and _bucket_of(b, bucket)]
                    sub = all_ious[f][np.ix_(di, gi)] if di and gi else np.zeros((len(di), len(gi)))
                    tp, pairs = match_frame([fd[i] for i in di], [fg[j] for j in gi], t, sub)
                    tps.append(tp)
                    scores.append(np.array([fd[i].score for i in di]))
                    num_gt += len(gi)
                    if name == "all" and t == thresholds[0] and cat == categories[0]:
                        result.matches.append([(di[a], gi[b]) for a, b in pairs])
                tp = np.concatenate(tps) if tps else np.zeros(0)
                sc = np.concatenate(scores) if scores else np.zeros(0)
                ap, prec, rec = average_precision(tp, sc, num_gt)
                result.ap[(cat, t, name)] = ap
                result.pr_curve[(cat, t, name)] = list(zip(prec.tolist(), rec.tolist()))
    return result


def latency_probe(stage: Callable[[], object], runs: int = 5, warmup: int = 1) -> dict:
    """Median wall time (ms) of ``stage`` over ``runs`` calls after warm-up."""
    runs = max(int(runs), 5)
    for _ in range(warmup):
        stage()
    times = []
    for _ in range(runs):
        t0 = time.perf_counter()
        stage()
        times.append((time.perf_counter() - t0) * 1e3)
    return {
        "median_ms": statistics.median(times),
        "variance_ms2": statistics.pvariance(times),
        "runs": times,
    }
