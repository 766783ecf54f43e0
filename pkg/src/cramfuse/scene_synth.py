"""Seeded synthetic driving scenes and sensor renderings.

Scenes hold road-aligned vehicles in front of the ego vehicle. The camera
renderer ray-casts boxes analytically; the radar renderer paints BEV
footprints with speckle and adds clutter, including "ghost" returns that
have no camera counterpart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    FORWARD_LOOKING,
    Box3D,
    CameraModel,
    NotVisible,
    RadarModel,
    RigidTransform,
    pixel_to_ray,
    project_box_to_image,
    rot_z,
)


class SceneError(RuntimeError):
    pass


def child_seed(seed: int, index: int, stream: int = 0) -> int:
    """Splittable seed derivation: (seed, index, stream) -> 63-bit child seed."""
    ss = np.random.SeedSequence([int(seed), int(index), int(stream)])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class SceneConfig:
    min_boxes: int = 2
    max_boxes: int = 6
    bounds: tuple[float, float, float, float] = (6.0, 44.0, -14.0, 14.0)
    length: tuple[float, float] = (3.8, 4.8)
    width: tuple[float, float] = (1.7, 2.0)
    height: tuple[float, float] = (1.4, 1.8)
    heading_jitter: float = 0.15
    noisy_fraction: float = 0.0
    max_tries: int = 200
    fov_half_angle: float = 0.7  # every footprint corner within this bearing

    def __post_init__(self):
        if self.min_boxes < 0 or self.max_boxes < self.min_boxes:
            raise SceneError("box count range invalid")
        for lo, hi in (self.length, self.width, self.height):
            if not 0 < lo <= hi:
                raise SceneError("size ranges must be positive")


@dataclass
class Scene:
    boxes: list
    weather_tag: str = "clear"
    bounds: tuple = (6.0, 44.0, -14.0, 14.0)

    def to_dict(self) -> dict:
        return {
            "boxes": [b.to_dict() for b in self.boxes],
            "weather_tag": self.weather_tag,
            "bounds": list(self.bounds),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Scene":
        return cls([Box3D.from_dict(b) for b in data["boxes"]], data["weather_tag"], tuple(data["bounds"]))

    def __eq__(self, other):
        return (
            isinstance(other, Scene)
            and self.weather_tag == other.weather_tag
            and tuple(self.bounds) == tuple(other.bounds)
            and len(self.boxes) == len(other.boxes)
            and all(a == b for a, b in zip(self.boxes, other.boxes))
        )


@dataclass
class SensorFrame:
    camera_image: np.ndarray   # H x W float32 in [0, 1]
    true_depth: np.ndarray     # H x W float32, 0 where no surface
    depth_valid: np.ndarray    # H x W bool
    radar_rf: np.ndarray       # Hr x Wr float32 in [0, 1]

    def copy(self) -> "SensorFrame":
        return SensorFrame(
            self.camera_image.copy(), self.true_depth.copy(),
            self.depth_valid.copy(), self.radar_rf.copy(),
        )

    def __eq__(self, other):
        return isinstance(other, SensorFrame) and all(
            a.dtype == b.dtype and np.array_equal(a, b)
            for a, b in zip(
                (self.camera_image, self.true_depth, self.depth_valid, self.radar_rf),
                (other.camera_image, other.true_depth, other.depth_valid, other.radar_rf),
            )
        )


@dataclass(frozen=True)
class CorruptionSpec:
    gaussian_sigma: float = 0.0
    rf_intensity_threshold: float | None = None

    def __post_init__(self):
        if self.gaussian_sigma < 0:
            raise ValueError("gaussian_sigma must be >= 0")
        t = self.rf_intensity_threshold
        if t is not None and not 0.0 <= t <= 1.0:
            raise ValueError("rf_intensity_threshold must lie in [0, 1]")


@dataclass(frozen=True)
class RenderConfig:
    # camera
    background_level: float = 0.12
    background_texture: float = 0.04
    albedo: tuple[float, float] = (0.96, 1.0)
    face_shades: tuple[float, float, float] = (1.0, 0.97, 0.94)  # x, y, z faces
    intensity_floor: float = 0.35
    attenuation_length: float = 25.0
    depth_valid_rate: float = 0.3
    camera_noise: float = 0.0
    # radar
    box_response: float = 0.75
    speckle_sigma: float = 0.25
    clutter_level: float = 0.06
    clutter_speckle: float = 0.6
    ghosts: tuple[int, int] = (1, 3)
    ghost_size: tuple[float, float] = (1.5, 4.0)
    ghost_fov: float = 0.7


def default_camera() -> CameraModel:
    return CameraModel(
        fx=96.0, fy=96.0, cx=96.0, cy=32.0, width=192, height=64,
        extrinsics=RigidTransform(FORWARD_LOOKING, np.array([0.0, 0.0, 1.5])),
    )


def default_radar() -> RadarModel:
    return RadarModel(extent=(0.0, 50.0, -20.0, 20.0), cell_size=0.25, sensor_height=0.8)


def _boxes_overlap(a: Box3D, b: Box3D, margin: float) -> bool:
    # separating-axis test on the BEV footprints
    pa, pb = a.bev_corners(), b.bev_corners()
    for poly in (pa, pb):
        for i in range(4):
            e = poly[(i + 1) % 4] - poly[i]
            n = np.array([-e[1], e[0]]) / np.linalg.norm(e)
            ra, rb = pa @ n, pb @ n
            if ra.max() + margin < rb.min() or rb.max() + margin < ra.min():
                return False
    return True


def generate_scene(seed: int, config: SceneConfig = SceneConfig()) -> Scene:
    """Place road-aligned vehicles without BEV overlap inside the camera view."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(config.min_boxes, config.max_boxes + 1))
    x0, x1, y0, y1 = config.bounds
    weather = "noisy" if rng.random() < config.noisy_fraction else "clear"
    boxes: list[Box3D] = []
    tries = 0
    while len(boxes) < n:
        tries += 1
        if tries > config.max_tries:
            raise SceneError(f"could not place {n} boxes within {config.max_tries} tries")
        l = rng.uniform(*config.length)
        w = rng.uniform(*config.width)
        h = rng.uniform(*config.height)
        heading = rng.uniform(-config.heading_jitter, config.heading_jitter)
        if rng.random() < 0.5:
            heading += np.pi
        reach = 0.5 * np.hypot(l, w)
        cx = rng.uniform(x0 + reach, x1 - reach)
        cy = rng.uniform(y0 + reach, y1 - reach)
        box = Box3D(np.array([cx, cy, h / 2.0]), np.array([l, w, h]), heading)
        corners = box.bev_corners()
        if np.any(np.abs(np.arctan2(corners[:, 1], corners[:, 0])) > config.fov_half_angle):
            continue
        if any(_boxes_overlap(box, other, 0.5) for other in boxes):
            continue
        boxes.append(box)
    return Scene(boxes, weather, tuple(config.bounds))


def ray_box_intersection(origin, dirs, box: Box3D):
    """Entry distance of rays into an oriented box (slab test).

    ``dirs`` is (..., 3). Returns distances along the rays with +inf where
    the ray misses or the box lies behind the origin.
    """
    rot = rot_z(box.heading)
    o = (np.asarray(origin, dtype=np.float64) - box.center) @ rot
    d = np.asarray(dirs, dtype=np.float64) @ rot
    half = box.size / 2.0
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    lo = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    hi = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # parallel rays: inside slab -> unbounded, outside -> miss
    par = d == 0
    inside = np.abs(o) <= half
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    t_near = lo.max(axis=-1)
    t_far = hi.min(axis=-1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf), np.argmax(lo, axis=-1)


def pixel_grid(cam: CameraModel) -> np.ndarray:
    """Pixel-center coordinates (H, W, 2) as (u, v)."""
    v, u = np.mgrid[0:cam.height, 0:cam.width]
    return np.stack([u + 0.5, v + 0.5], axis=-1).astype(np.float64)


def render_camera(scene: Scene, cam: CameraModel, seed: int = 0, config: RenderConfig = RenderConfig()):
    """Ray-cast the boxes; returns (camera_image, true_depth, depth_valid).

    Depth is camera-frame z of the nearest surface hit (0 where no box).
    Surface brightness is albedo * face shade * (floor + (1 - floor) *
    exp(-z / attenuation_length)), so intensity carries a depth cue;
    background is dim texture.
    """
    rng = np.random.default_rng(seed)
    ray = pixel_to_ray(cam, pixel_grid(cam))
    dirs = ray.direction
    best = np.full(dirs.shape[:2], np.inf)
    shade = np.zeros(dirs.shape[:2])
    face_shades = np.asarray(config.face_shades)
    for box in scene.boxes:
        t, axis = ray_box_intersection(ray.origin, dirs, box)
        albedo = rng.uniform(*config.albedo)
        nearer = t < best
        best = np.where(nearer, t, best)
        shade = np.where(nearer, albedo * face_shades[axis], shade)
    hit = np.isfinite(best)
    # camera-frame z of hit points = range * (direction . optical axis)
    axis_world = cam.extrinsics.rotation[:, 2]
    depth = np.where(hit, best * (dirs @ axis_world), 0.0)
    rng_bg = np.random.default_rng([seed, 1])
    background = config.background_level + config.background_texture * rng_bg.standard_normal(depth.shape)
    f = config.intensity_floor
    fade = f + (1.0 - f) * np.exp(-depth / config.attenuation_length)
    image = np.where(hit, shade * fade, background)
    if config.camera_noise > 0:
        image = image + config.camera_noise * rng_bg.standard_normal(depth.shape)
    image = np.clip(image, 0.0, 1.0)
    valid = hit & (rng.random(depth.shape) < config.depth_valid_rate)
    return image.astype(np.float32), depth.astype(np.float32), valid


def render_radar(scene: Scene, radar: RadarModel, seed: int = 0, config: RenderConfig = RenderConfig()):
    """BEV RF image: speckled footprints, low clutter and ghost returns."""
    rng = np.random.default_rng(seed)
    xs, ys = radar.cell_centers()
    pts = np.stack([xs.ravel(), ys.ravel()], axis=-1)
    pts3 = np.concatenate([pts, np.zeros((len(pts), 1))], axis=-1)
    mean = np.zeros(len(pts))
    for box in scene.boxes:
        inside = box.contains(pts3, bev=True)
        mean[inside] = config.box_response
    lo, hi = config.ghosts
    n_ghosts = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    x0, x1, y0, y1 = scene.bounds
    for _ in range(n_ghosts):
        size = rng.uniform(*config.ghost_size, size=2)
        gx = rng.uniform(x0, x1)
        gy = np.clip(rng.uniform(y0, y1), -gx * np.tan(config.ghost_fov), gx * np.tan(config.ghost_fov))
        ghost = Box3D(
            np.array([gx, gy, 0.0]),
            np.array([size[0], size[1], 1.0]),
            rng.uniform(-np.pi, np.pi),
        )
        if any(_boxes_overlap(ghost, b, 1.0) for b in scene.boxes):
            continue
        inside = ghost.contains(pts3, bev=True)
        mean[inside] = config.box_response
    speckle = np.exp(config.speckle_sigma * rng.standard_normal(len(pts)) - 0.5 * config.speckle_sigma**2)
    clutter = config.clutter_level * np.exp(
        config.clutter_speckle * rng.standard_normal(len(pts)) - 0.5 * config.clutter_speckle**2
    )
    rf = np.where(mean > 0, mean * speckle, clutter)
    return np.clip(rf, 0.0, 1.0).reshape(radar.shape).astype(np.float32)


def corrupt_camera(frame: SensorFrame, sigma: float, seed: int = 0) -> SensorFrame:
    """Additive Gaussian white noise on the camera image, clipped to [0, 1]."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    out = frame.copy()
    if sigma == 0:
        return out
    rng = np.random.default_rng(seed)
    noise = sigma * rng.standard_normal(frame.camera_image.shape)
    out.camera_image = np.clip(frame.camera_image + noise, 0.0, 1.0).astype(np.float32)
    return out


def threshold_rf(radar_rf: np.ndarray, t: float):
    """Cells with intensity strictly above ``t``: (rows, cols, intensities)."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    rows, cols = np.nonzero(radar_rf > t)
    return rows, cols, radar_rf[rows, cols]


def apply_rf_threshold(radar_rf: np.ndarray, t: float) -> np.ndarray:
    """Dense RF image keeping only the cells returned by ``threshold_rf``."""
    rows, cols, vals = threshold_rf(radar_rf, t)
    out = np.zeros_like(radar_rf)
    out[rows, cols] = vals
    return out


def camera_foreground_mask(scene: Scene, cam: CameraModel) -> np.ndarray:
    """Pixels inside any projected 2D box hull (segmentation labels)."""
    from matplotlib.path import Path

    grid = pixel_grid(cam).reshape(-1, 2)
    mask = np.zeros(len(grid), dtype=bool)
    for box in scene.boxes:
        try:
            hull = project_box_to_image(cam, box)
        except NotVisible:
            continue
        if len(hull) < 3:
            continue
        mask |= Path(hull).contains_points(grid)
    return mask.reshape(cam.height, cam.width)


def radar_foreground_mask(scene: Scene, radar: RadarModel) -> np.ndarray:
    xs, ys = radar.cell_centers()
    pts = np.stack([xs.ravel(), ys.ravel(), np.zeros(xs.size)], axis=-1)
    mask = np.zeros(len(pts), dtype=bool)
    for box in scene.boxes:
        mask |= box.contains(pts, bev=True)
    return mask.reshape(radar.shape)


@dataclass
class Sample:
    """One scene with its sensor models, renderings and labels."""

    scene: Scene
    frame: SensorFrame
    camera: CameraModel
    radar: RadarModel
    seed: int
    camera_fg: np.ndarray = field(default=None, repr=False)
    radar_fg: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.camera_fg is None:
            self.camera_fg = camera_foreground_mask(self.scene, self.camera)
        if self.radar_fg is None:
            self.radar_fg = radar_foreground_mask(self.scene, self.radar)


def make_sample(
    seed: int,
    scene_config: SceneConfig = SceneConfig(),
    render_config: RenderConfig = RenderConfig(),
    camera: CameraModel | None = None,
    radar: RadarModel | None = None,
) -> Sample:
    camera = camera or default_camera()
    radar = radar or default_radar()
    scene = generate_scene(child_seed(seed, 0, 0), scene_config)
    rc = render_config
    if scene.weather_tag == "noisy":
        rc = RenderConfig(**{**rc.__dict__, "camera_noise": max(rc.camera_noise, 0.1)})
    image, depth, valid = render_camera(scene, camera, child_seed(seed, 0, 1), rc)
    rf = render_radar(scene, radar, child_seed(seed, 0, 2), rc)
    return Sample(scene, SensorFrame(image, depth, valid, rf), camera, radar, seed)


def make_dataset(seed: int, n: int, scene_config=SceneConfig(), render_config=RenderConfig()) -> list:
    return [make_sample(child_seed(seed, i), scene_config, render_config) for i in range(n)]
