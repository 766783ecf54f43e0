"""Sensor models, coordinate frames and the 3D augmentations.

World frame is the ego frame at capture time: x forward, y left, z up.
Camera frame follows the pinhole convention: x right, y down, z forward.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHO_TOL = 1e-9


class GeometryError(ValueError):
    """Domain violation in a geometric operation."""


class NotVisible(Exception):
    """The queried point or box is not in front of the camera."""


def normalize_angle(theta):
    """Wrap angles to [-pi, pi)."""
    wrapped = np.mod(np.asarray(theta, dtype=np.float64) + np.pi, 2.0 * np.pi) - np.pi
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if np.abs(r.T @ r - np.eye(3)).max() >= ORTHO_TOL or np.linalg.det(r) <= 0:
            raise GeometryError("rotation must be orthonormal with det +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {"rotation": self.rotation.tolist(), "translation": self.translation.tolist()}

    @classmethod
    def from_dict(cls, data: dict) -> "RigidTransform":
        return cls(np.array(data["rotation"]), np.array(data["translation"]))


# camera axes (right, down, forward) expressed in world (forward, left, up)
FORWARD_LOOKING = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsics: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        return self.extrinsics.translation

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "extrinsics": self.extrinsics.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CameraModel":
        data = dict(data)
        data["extrinsics"] = RigidTransform.from_dict(data["extrinsics"])
        return cls(**data)


@dataclass(frozen=True)
class RadarModel:
    """Cartesian BEV radar grid.

    Row index runs along world x, column index along world y; a cell maps
    to its geometric center.
    """

    extent: tuple[float, float, float, float]  # x_min, x_max, y_min, y_max
    cell_size: float
    sensor_height: float
    pose: RigidTransform = field(default_factory=RigidTransform)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise GeometryError("cell_size must be positive")
        x0, x1, y0, y1 = self.extent
        if not (x1 > x0 and y1 > y0):
            raise GeometryError("radar extent is degenerate")
        object.__setattr__(self, "extent", tuple(float(v) for v in self.extent))

    @property
    def shape(self) -> tuple[int, int]:
        x0, x1, y0, y1 = self.extent
        return (int(round((x1 - x0) / self.cell_size)), int(round((y1 - y0) / self.cell_size)))

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """World (x, y) of every cell center as two (rows, cols) grids."""
        rows, cols = self.shape
        xs = self.extent[0] + (np.arange(rows) + 0.5) * self.cell_size
        ys = self.extent[2] + (np.arange(cols) + 0.5) * self.cell_size
        return np.meshgrid(xs, ys, indexing="ij")

    def to_dict(self) -> dict:
        return {
            "extent": list(self.extent), "cell_size": self.cell_size,
            "sensor_height": self.sensor_height, "pose": self.pose.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RadarModel":
        return cls(
            tuple(data["extent"]), data["cell_size"], data["sensor_height"],
            RigidTransform.from_dict(data["pose"]),
        )


@dataclass(frozen=True)
class PixelRay:
    origin: np.ndarray
    direction: np.ndarray

    def at(self, depth):
        """Point(s) at the given distance along the unit direction."""
        depth = np.asarray(depth, dtype=np.float64)
        return self.origin + depth[..., None] * self.direction


@dataclass
class Box3D:
    """Oriented 3D box: center (x, y, z), size (l, w, h), heading about z."""

    center: np.ndarray
    size: np.ndarray
    heading: float
    score: float = 1.0
    category: str = "vehicle"

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
        self.heading = normalize_angle(float(self.heading))
        self.score = float(self.score)

    def corners(self) -> np.ndarray:
        """The 8 corners, bottom face first, counter-clockwise."""
        l, w, h = self.size / 2.0
        local = np.array([
            [l, w, -h], [-l, w, -h], [-l, -w, -h], [l, -w, -h],
            [l, w, h], [-l, w, h], [-l, -w, h], [l, -w, h],
        ])
        return local @ rot_z(self.heading).T + self.center

    def bev_corners(self) -> np.ndarray:
        """Footprint as a counter-clockwise 4x2 polygon."""
        return self.corners()[:4, :2]

    def contains(self, points, bev: bool = False) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=np.float64)) - self.center
        c, s = np.cos(self.heading), np.sin(self.heading)
        u = c * p[:, 0] + s * p[:, 1]
        v = -s * p[:, 0] + c * p[:, 1]
        inside = (np.abs(u) <= self.size[0] / 2) & (np.abs(v) <= self.size[1] / 2)
        if not bev:
            inside &= np.abs(p[:, 2]) <= self.size[2] / 2
        return inside

    def to_dict(self) -> dict:
        return {
            "center": self.center.tolist(), "size": self.size.tolist(),
            "heading": self.heading, "score": self.score, "category": self.category,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Box3D":
        return cls(**data)

    def __eq__(self, other):
        if not isinstance(other, Box3D):
            return NotImplemented
        return (
            np.array_equal(self.center, other.center)
            and np.array_equal(self.size, other.size)
            and self.heading == other.heading
            and self.score == other.score
            and self.category == other.category
        )


def _check_pixels(cam: CameraModel, px) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    u, v = px[..., 0], px[..., 1]
    if np.any((u < 0) | (u > cam.width) | (v < 0) | (v > cam.height)) or not np.all(np.isfinite(px)):
        raise GeometryError("pixel outside image bounds")
    return px


def _camera_dirs(cam: CameraModel, px: np.ndarray) -> np.ndarray:
    x = (px[..., 0] - cam.cx) / cam.fx
    y = (px[..., 1] - cam.cy) / cam.fy
    return np.stack([x, y, np.ones_like(x)], axis=-1)


def pixel_to_ray(cam: CameraModel, px) -> PixelRay:
    """Viewing ray through pixel coordinates (u, v), in world frame.

    Accepts a single pixel or an (..., 2) array; the direction array then
    carries the leading shape.
    """
    px = _check_pixels(cam, px)
    d_cam = _camera_dirs(cam, px)
    d_cam = d_cam / np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_world = d_cam @ cam.extrinsics.rotation.T
    return PixelRay(cam.center.copy(), d_world)


def project_pixel_depth(cam: CameraModel, px, depth) -> np.ndarray:
    """Back-project pixel(s) at camera-frame depth z to world points."""
    px = _check_pixels(cam, px)
    depth = np.asarray(depth, dtype=np.float64)
    if np.any(depth <= 0) or not np.all(np.isfinite(depth)):
        raise GeometryError("depth must be positive")
    p_cam = _camera_dirs(cam, px) * depth[..., None]
    return cam.extrinsics.apply(p_cam)


def world_to_camera(cam: CameraModel, p) -> np.ndarray:
    return cam.extrinsics.inverse().apply(p)


def world_to_pixel(cam: CameraModel, p):
    """Project world point(s) to ((u, v), depth).

    A single point behind the camera raises NotVisible. For batches, the
    returned depth is <= 0 wherever the point is not visible and the
    pixel entries there are NaN.
    """
    p = np.asarray(p, dtype=np.float64)
    q = world_to_camera(cam, p)
    z = q[..., 2]
    if p.ndim == 1:
        if z <= 0:
            raise NotVisible("point is behind the camera")
        return np.array([cam.fx * q[0] / z + cam.cx, cam.fy * q[1] / z + cam.cy]), float(z)
    with np.errstate(divide="ignore", invalid="ignore"):
        safe = np.where(z > 0, z, np.nan)
        uv = np.stack([cam.fx * q[..., 0] / safe + cam.cx, cam.fy * q[..., 1] / safe + cam.cy], axis=-1)
    return uv, z


def radar_cell_to_point(radar: RadarModel, cell) -> np.ndarray:
    """World point of radar cell(s) (row, col) at the sensor height."""
    cell = np.asarray(cell)
    rows, cols = radar.shape
    r, c = cell[..., 0], cell[..., 1]
    if np.any((r < 0) | (r >= rows) | (c < 0) | (c >= cols)):
        raise GeometryError("radar cell outside grid")
    x = radar.extent[0] + (r + 0.5) * radar.cell_size
    y = radar.extent[2] + (c + 0.5) * radar.cell_size
    z = np.full(np.shape(x), float(radar.sensor_height))
    return np.stack([x, y, z], axis=-1).astype(np.float64)


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain, counter-clockwise in (u, v)."""
    pts = sorted(set(map(tuple, np.round(points, 12))))
    if len(pts) <= 2:
        return np.array(pts)

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def project_box_to_image(cam: CameraModel, box: Box3D) -> np.ndarray:
    """Convex hull (pixels) of the box corners in front of the camera.

    Corners behind the camera are dropped rather than frustum-clipped.
    """
    uv, z = world_to_pixel(cam, box.corners())
    visible = z > 0
    if not visible.any():
        raise NotVisible("box is entirely behind the camera")
    return _convex_hull(uv[visible])


def augment_flip_x(points, boxes):
    """Mirror across the x-axis (y -> -y); headings are negated."""
    pts = np.array(points, dtype=np.float64, copy=True)
    pts[..., 1] = -pts[..., 1]
    out = []
    for b in boxes:
        c = b.center.copy()
        c[1] = -c[1]
        out.append(Box3D(c, b.size.copy(), normalize_angle(-b.heading), b.score, b.category))
    return pts, out


def augment_rotate_z(points, boxes, angle: float):
    """Global rotation about the z-axis; headings are incremented."""
    rot = rot_z(angle)
    pts = np.asarray(points, dtype=np.float64) @ rot.T
    out = [
        Box3D(rot @ b.center, b.size.copy(), normalize_angle(b.heading + angle), b.score, b.category)
        for b in boxes
    ]
    return pts, out
