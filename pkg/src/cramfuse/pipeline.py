"""Stage 1 to 3 detector: forward passes, training objectives and evaluation.

Stage 1 scores every camera pixel and radar cell and keeps those above
``tau``. Stage 2 predicts camera depth, lifts camera pixels along their
rays (optionally refined by ray-constrained attention) and radar cells at
sensor height, then fuses both into one coded point cloud. Stage 3
voxelizes the cloud into BEV pillars, aggregates neighborhoods and applies
the heatmap and box heads.

Gradients stop at the 2D to 3D boundary: each head is trained only by the
loss terms it feeds directly, so the joint objective splits into a
stage 1/2 part and a stage 3 part.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .attention import refine_camera_points
from .config import ConfigError, PipelineConfig, TrainConfig
from .detect import decode_boxes, nms_rotated
from .features import FeatureMap, extract_features, predict_depth, score_foreground, select_foreground, sigmoid
from .fusion import DropoutDecision, FusedCloud, apply_dropout, draw_dropout, drop_inputs, fuse
from .geometry import Box3D, augment_flip_x, augment_rotate_z, radar_cell_to_point
from .learner import FitResult, Heads, TinyHead, fit, head_backward, head_forward
from .losses import (
    box_regression_loss,
    depth_l2_loss,
    heatmap_focal_loss,
    heatmap_gt,
    seg_focal_loss,
    total_loss,
)
from .metrics import EvalResult, bev_ap
from .scene_synth import Sample, apply_rf_threshold, child_seed, corrupt_camera
from .voxel import VoxelGrid, apply_detection_head, multi_scale_features, voxelize_dynamic

log = logging.getLogger(__name__)

MODES = ("fusion", "camera_only", "radar_only")
NO_DROP = DropoutDecision(1.0, 0.0, "none")


def _check_mode(mode: str) -> None:
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}; expected one of {MODES}")


def uses_camera(mode: str) -> bool:
    return mode != "radar_only"


def uses_radar(mode: str) -> bool:
    return mode != "camera_only"


def detection_dim(config: PipelineConfig) -> int:
    k = 2 if config.voxel_mode == "pillar" else 3
    f = config.d + 2
    return f + len(config.neighbor_radii) * (f + 1 + k)


def box_dim(config: PipelineConfig) -> int:
    return 7 + config.num_heading_bins


def init_heads(config: PipelineConfig, mode: str = "fusion", hidden: int = 16, seed: int = 0) -> Heads:
    """Fresh heads for ``mode``.

    Output layers start at zero except for biases: depth starts near 20 m
    and the heatmap near a 5% prior, so early steps are not wasted on scale.
    """
    _check_mode(mode)
    rng = np.random.default_rng(seed)
    d, dd = config.d, detection_dim(config)
    heads: Heads = {}
    if uses_camera(mode):
        heads["cam_seg"] = TinyHead.init(d, 1, hidden, rng)
        heads["cam_depth"] = TinyHead.init(d, 1, hidden, rng)
        heads["cam_depth"].biases[-1][:] = 20.0
    if uses_radar(mode):
        heads["rad_seg"] = TinyHead.init(d, 1, hidden, rng)
    heads["hm"] = TinyHead.init(dd, 1, 2 * hidden, rng)
    heads["hm"].biases[-1][:] = -3.0
    heads["box"] = TinyHead.init(dd, box_dim(config), 2 * hidden, rng)
    return heads


@dataclass
class FrameInputs:
    """Head-independent per-frame data after corruption and input dropout."""

    sample: Sample
    camera_fm: FeatureMap | None
    radar_fm: FeatureMap | None


def frame_inputs(
    sample: Sample,
    config: PipelineConfig,
    mode: str = "fusion",
    camera_sigma: float = 0.0,
    rf_threshold: float = 0.0,
    decision: DropoutDecision = NO_DROP,
) -> FrameInputs:
    _check_mode(mode)
    image = sample.frame.camera_image
    if camera_sigma > 0:
        image = corrupt_camera(sample.frame, camera_sigma, child_seed(sample.seed, 0, 3)).camera_image
    rf = sample.frame.radar_rf
    if rf_threshold > 0:
        rf = apply_rf_threshold(rf, rf_threshold)
    image, rf = drop_inputs(image, rf, decision)
    cam_fm = extract_features(image, config.d) if uses_camera(mode) else None
    rad_fm = extract_features(rf, config.d) if uses_radar(mode) else None
    return FrameInputs(sample, cam_fm, rad_fm)


@dataclass
class Lifted:
    """Stage 2 output: 3D points with features per modality."""

    camera_points: np.ndarray
    camera_feats: np.ndarray
    radar_points: np.ndarray
    radar_feats: np.ndarray

    @property
    def num_points(self) -> int:
        return len(self.camera_points) + len(self.radar_points)


def lift(heads: Heads, inputs: FrameInputs, config: PipelineConfig) -> Lifted:
    """Stages 1 and 2: select foreground and place it in 3D."""
    d = config.d
    sample = inputs.sample
    cp, cf = np.zeros((0, 3)), np.zeros((0, d))
    rp, rf = np.zeros((0, 3)), np.zeros((0, d))
    if inputs.camera_fm is not None:
        pix = select_foreground(score_foreground(inputs.camera_fm, heads["cam_seg"]), config.tau)
        depth = predict_depth(inputs.camera_fm, heads["cam_depth"])
        refined = refine_camera_points(
            pix, depth, inputs.camera_fm, inputs.radar_fm, sample.camera, sample.radar, config
        )
        cp, cf = refined.points, refined.features
    if inputs.radar_fm is not None:
        cells = select_foreground(score_foreground(inputs.radar_fm, heads["rad_seg"]), config.tau)
        if len(cells):
            rp = radar_cell_to_point(sample.radar, cells)
            rf = inputs.radar_fm.grid[cells[:, 0], cells[:, 1]]
    return Lifted(cp, cf, rp, rf)


def build_cloud(lifted: Lifted, config: PipelineConfig, decision: DropoutDecision = NO_DROP, seed=0) -> FusedCloud:
    cloud = fuse(lifted.camera_points, lifted.camera_feats, lifted.radar_points, lifted.radar_feats, config.modality_code)
    if decision.dropped != "none":
        cloud = apply_dropout(cloud, decision, config.dropout_location, config.p_drop, seed)
    return cloud


def voxel_features(cloud: FusedCloud, config: PipelineConfig) -> tuple[VoxelGrid, np.ndarray]:
    grid = voxelize_dynamic(cloud, config.region_min, config.region_max, config.voxel_size, config.voxel_mode)
    return grid, multi_scale_features(grid, config.neighbor_radii, centroid=True)


@dataclass
class Detections:
    boxes: list
    num_points: int
    num_voxels: int


def detect_frame(
    heads: Heads,
    sample: Sample,
    config: PipelineConfig,
    mode: str = "fusion",
    camera_sigma: float = 0.0,
    rf_threshold: float = 0.0,
) -> Detections:
    """Full inference on one frame: decoded, NMS-filtered boxes."""
    inputs = frame_inputs(sample, config, mode, camera_sigma, rf_threshold)
    lifted = lift(heads, inputs, config)
    cloud = build_cloud(lifted, config, NO_DROP, seed=None)
    grid, x = voxel_features(cloud, config)
    if len(grid) == 0:
        return Detections([], lifted.num_points, 0)
    heat, params = apply_detection_head(grid, heads["hm"], heads["box"], x)
    boxes = decode_boxes(grid.centers, heat, params, config.tau_score, config.num_heading_bins)
    return Detections(nms_rotated(boxes, config.nms_iou, config.max_out), lifted.num_points, len(grid))


def evaluate(
    heads: Heads,
    samples,
    config: PipelineConfig,
    mode: str = "fusion",
    camera_sigma: float = 0.0,
    rf_threshold: float = 0.0,
    iou_thresh: float = 0.5,
) -> tuple[EvalResult, list]:
    dets = [detect_frame(heads, s, config, mode, camera_sigma, rf_threshold) for s in samples]
    result = bev_ap([d.boxes for d in dets], [s.scene.boxes for s in samples], iou_thresh)
    return result, dets


# ---------------------------------------------------------------- objectives


def _logit_grad(head: TinyHead, x: np.ndarray, dy: np.ndarray) -> list:
    grads, _ = head_backward(head, x, dy[:, None])
    return grads


def stage12_parts(heads: Heads, inputs: FrameInputs, config: PipelineConfig) -> dict:
    """Segmentation and depth terms with gradients for the 2D heads."""
    sample = inputs.sample
    parts = {}
    seg_value, seg_grads = 0.0, {}
    for name, fm, labels in (
        ("cam_seg", inputs.camera_fm, sample.camera_fg),
        ("rad_seg", inputs.radar_fm, sample.radar_fg),
    ):
        if fm is None:
            continue
        x = fm.flat()
        z = head_forward(heads[name], x)[:, 0]
        p = sigmoid(z)
        v, dp = seg_focal_loss(p, labels.reshape(-1), config.gamma_s)
        seg_value += v
        seg_grads[name] = _logit_grad(heads[name], x, dp * p * (1.0 - p))
    if seg_grads:
        parts["seg"] = (seg_value, seg_grads)
    if inputs.camera_fm is not None:
        valid = sample.frame.depth_valid.reshape(-1)
        x = inputs.camera_fm.flat()[valid]
        z = head_forward(heads["cam_depth"], x)[:, 0]
        pred = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z))) + config.min_depth
        gt = sample.frame.true_depth.reshape(-1)[valid].astype(np.float64)
        v, dpred = depth_l2_loss(pred, gt, np.ones(len(gt), bool))
        parts["depth"] = (v, {"cam_depth": _logit_grad(heads["cam_depth"], x, dpred * sigmoid(z))})
    return parts


@dataclass
class Stage3Item:
    """Cached detection-head inputs and targets for one cloud variant."""

    features: np.ndarray
    centers: np.ndarray
    target: object


def stage3_item(cloud: FusedCloud, boxes, config: PipelineConfig) -> Stage3Item:
    grid, x = voxel_features(cloud, config)
    target = heatmap_gt(grid.centers, boxes, config.sigma_h, bev=True)
    return Stage3Item(x, grid.centers, target)


def stage3_parts(heads: Heads, item: Stage3Item, config: PipelineConfig) -> dict:
    """Heatmap and box terms with gradients for the detection heads."""
    if len(item.features) == 0:
        return {"hm": 0.0, "box": 0.0}
    x = item.features
    z = head_forward(heads["hm"], x)[:, 0]
    h = sigmoid(z)
    v_hm, dh = heatmap_focal_loss(h, item.target.values, config.alpha_h, config.gamma_h, config.epsilon_h)
    params = head_forward(heads["box"], x)
    box = box_regression_loss(params, item.centers, item.target, config.tau_hm, config.num_heading_bins)
    parts = {"hm": (v_hm, {"hm": _logit_grad(heads["hm"], x, dh * h * (1.0 - h))})}
    if box.count:
        g, _ = head_backward(heads["box"], x, box.grad)
        parts["box"] = (box.value, {"box": g})
    else:
        parts["box"] = 0.0
    return parts


def _weights(config: PipelineConfig):
    return (config.lambda_seg, config.lambda_depth, config.lambda_hm)


def _augment(cloud: FusedCloud, boxes, flip: bool, angle: float):
    pts = cloud.points
    if flip:
        pts, boxes = augment_flip_x(pts, boxes)
    if angle:
        pts, boxes = augment_rotate_z(pts, boxes, angle)
    return FusedCloud(pts, cloud.features, cloud.source), boxes


def training_objective(heads: Heads, item, rng, config: PipelineConfig = PipelineConfig(), mode: str = "fusion"):
    """Joint loss of one frame under the current heads.

    ``item`` is a Sample or FrameInputs. Sensor dropout is drawn from
    ``rng`` when ``config.p_drop`` > 0 and both modalities are present.
    Returns (total loss, grads per head name).
    """
    inputs = item if isinstance(item, FrameInputs) else frame_inputs(item, config, mode)
    drop_seed, normal_seed = int(rng.integers(2**63)), int(rng.integers(2**63))
    decision = NO_DROP
    if config.p_drop > 0 and inputs.camera_fm is not None and inputs.radar_fm is not None:
        decision = draw_dropout(config.p_drop, drop_seed)
    parts = stage12_parts(heads, inputs, config)
    lifted = lift(heads, inputs, config)
    cloud = build_cloud(lifted, config, decision, seed=normal_seed)
    parts.update(stage3_parts(heads, stage3_item(cloud, inputs.sample.scene.boxes, config), config))
    report = total_loss(parts, _weights(config))
    return report.total, report.gradients


# ------------------------------------------------------------------ training


@dataclass
class TrainedModel:
    heads: Heads
    mode: str
    config: PipelineConfig
    trace_stage12: list = field(default_factory=list)
    trace_stage3: list = field(default_factory=list)


class Stage3Cache:
    """Stage 3 inputs per (frame, dropout branch, flip), built on demand.

    The 2D heads are frozen once stage 3 training starts, so each variant
    of a frame is computed at most once.
    """

    def __init__(self, heads: Heads, samples, config: PipelineConfig, mode: str, normal_variants: int = 4):
        self.heads, self.samples, self.config, self.mode = heads, samples, config, mode
        self.normal_variants = normal_variants
        self._lifted: dict = {}
        self._items: dict = {}

    def _lift(self, idx: int, decision: DropoutDecision) -> Lifted:
        key = (idx, decision.dropped if self.config.dropout_location == "input" else "none")
        if key not in self._lifted:
            d = decision if self.config.dropout_location == "input" else NO_DROP
            inputs = frame_inputs(self.samples[idx], self.config, self.mode, decision=d)
            self._lifted[key] = lift(self.heads, inputs, self.config)
        return self._lifted[key]

    def get(self, idx: int, decision: DropoutDecision, flip: bool, variant: int = 0, angle: float = 0.0) -> Stage3Item:
        key = (idx, decision.dropped, flip, variant, angle)
        if key not in self._items:
            lifted = self._lift(idx, decision)
            seed = child_seed(self.samples[idx].seed, variant, 4) if self.config.dropout_location == "normal" else None
            cloud = build_cloud(lifted, self.config, decision, seed)
            cloud, boxes = _augment(cloud, self.samples[idx].scene.boxes, flip, angle)
            self._items[key] = stage3_item(cloud, boxes, self.config)
        return self._items[key]


def train_model(samples, config: PipelineConfig, mode: str = "fusion", train: TrainConfig = TrainConfig()) -> TrainedModel:
    """Train the 2D heads, freeze them, then train the detection heads.

    Dropout (``config.p_drop`` > 0, fusion only), flips and rotations are
    drawn per step from the training seed; stage 3 inputs of each distinct
    variant are cached.
    """
    _check_mode(mode)
    samples = list(samples)
    heads = init_heads(config, mode, train.hidden, train.seed)
    inputs = [frame_inputs(s, config, mode) for s in samples]

    def obj12(h, item, rng):
        report = total_loss(stage12_parts(h, item, config), _weights(config))
        return report.total, report.gradients

    two_d = {k: heads[k] for k in heads if k not in ("hm", "box")}
    fit12 = fit(two_d, inputs, train.replace(steps=train.stage1_steps), obj12)
    heads.update(fit12.heads)

    cache = Stage3Cache(heads, samples, config, mode)
    use_drop = config.p_drop > 0 and mode == "fusion"
    variants = cache.normal_variants if config.dropout_location == "normal" else 1

    def obj3(h, idx, rng):
        # draw everything unconditionally so runs differing only in dropout
        # see the same frames, flips and rotations
        drop_seed = int(rng.integers(2**63))
        flip = bool(train.flip and rng.random() < 0.5)
        u = rng.uniform(-1.0, 1.0)
        variant = int(rng.integers(variants))
        decision = draw_dropout(config.p_drop, drop_seed) if use_drop else NO_DROP
        # quantized so cached variants stay few
        angle = float(np.round(u * train.max_rotation, 1))
        item = cache.get(idx, decision, flip, variant, angle)
        report = total_loss(stage3_parts(h, item, config), _weights(config))
        return report.total, report.gradients

    det = {k: heads[k] for k in ("hm", "box")}
    fit3 = fit(det, list(range(len(samples))), train, obj3)
    heads.update(fit3.heads)
    return TrainedModel(heads, mode, config, fit12.trace, fit3.trace)
