"""Dynamic voxelization and sparse neighborhood aggregation."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, replace

import numpy as np

from .features import sigmoid
from .fusion import FusedCloud
from .learner import TinyHead, head_forward


@dataclass(frozen=True)
class VoxelGrid:
    """Occupied cells sorted by linear key.

    ``members[offsets[i]:offsets[i + 1]]`` are the input point indices of
    cell ``i``. In pillar mode ``indices`` has two columns and centers sit at
    the vertical middle of the region.
    """

    region_min: np.ndarray
    region_max: np.ndarray
    voxel_size: float
    mode: str
    dims: np.ndarray       # cells per indexed axis
    keys: np.ndarray       # (M,) int64
    indices: np.ndarray    # (M, k)
    features: np.ndarray   # (M, F)
    centers: np.ndarray    # (M, 3)
    members: np.ndarray
    offsets: np.ndarray    # (M + 1,)

    def __len__(self):
        return len(self.keys)

    @property
    def counts(self) -> np.ndarray:
        return np.diff(self.offsets)

    def cell(self, index):
        """(mean feature, member indices, center) of the cell at ``index``."""
        key = _linear(np.asarray(index, dtype=np.int64)[None], self.dims)[0]
        i = np.searchsorted(self.keys, key)
        if i >= len(self.keys) or self.keys[i] != key:
            raise KeyError(tuple(index))
        return self.features[i], self.members[self.offsets[i]:self.offsets[i + 1]], self.centers[i]

    def as_dict(self) -> dict:
        return {tuple(int(v) for v in idx): self.features[i] for i, idx in enumerate(self.indices)}


def _linear(idx: np.ndarray, dims: np.ndarray) -> np.ndarray:
    key = np.zeros(len(idx), dtype=np.int64)
    for a in range(idx.shape[1]):
        key = key * dims[a] + idx[:, a]
    return key


def voxelize_dynamic(
    cloud: FusedCloud,
    region_min=(-100.0, -100.0, -5.0),
    region_max=(100.0, 100.0, 5.0),
    voxel_size: float = 0.2,
    mode: str = "voxel3d",
) -> VoxelGrid:
    """Assign every in-region point to its voxel; cell feature = member mean.

    Intervals are half-open, so a point at ``region_max`` is excluded. Points
    are put in a canonical order inside each cell (sorted by content) before
    summation, which makes the result independent of input order bit for bit.
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    if mode not in ("pillar", "voxel3d"):
        raise ValueError(f"unknown voxel mode {mode!r}")
    lo = np.asarray(region_min, dtype=np.float64)
    hi = np.asarray(region_max, dtype=np.float64)
    k = 2 if mode == "pillar" else 3
    dims = np.floor((hi - lo) / voxel_size + 1e-9).astype(np.int64)[:k]
    pts = cloud.points
    feats = cloud.features
    inside = np.all((pts >= lo) & (pts < hi), axis=1) if len(pts) else np.zeros(0, bool)
    sel = np.nonzero(inside)[0]
    idx = np.floor((pts[sel, :k] - lo[:k]) / voxel_size).astype(np.int64)
    idx = np.minimum(idx, dims - 1)
    keys = _linear(idx, dims)
    # primary key: cell; then point content, for a canonical in-cell order
    columns = [feats[sel, j] for j in range(feats.shape[1] - 1, -1, -1)]
    columns += [pts[sel, j] for j in range(2, -1, -1)]
    order = np.lexsort(columns + [keys]) if len(sel) else np.zeros(0, np.int64)
    keys_sorted = keys[order]
    starts = np.flatnonzero(np.r_[True, keys_sorted[1:] != keys_sorted[:-1]]) if len(order) else np.zeros(0, np.int64)
    offsets = np.r_[starts, len(order)].astype(np.int64)
    sums = np.add.reduceat(feats[sel][order], starts, axis=0) if len(order) else np.zeros((0, feats.shape[1]))
    counts = np.diff(offsets)
    means = sums / counts[:, None]
    cell_idx = idx[order][starts] if len(order) else np.zeros((0, k), np.int64)
    centers = np.empty((len(starts), 3))
    centers[:, :k] = lo[:k] + (cell_idx + 0.5) * voxel_size
    if k == 2:
        centers[:, 2] = 0.5 * (lo[2] + hi[2])
    return VoxelGrid(
        lo, hi, float(voxel_size), mode, dims, keys_sorted[starts] if len(order) else np.zeros(0, np.int64),
        cell_idx, means, centers, sel[order], offsets,
    )


def window_offsets(radius: int, ndim: int) -> np.ndarray:
    """All Chebyshev-ball offsets, lexicographic order."""
    return np.array(list(itertools.product(range(-radius, radius + 1), repeat=ndim)), dtype=np.int64)


def _scan(grid: VoxelGrid, radius: int):
    """Sums over occupied neighbors: (feature sum, count, index-offset sum)."""
    m, f = grid.features.shape
    k = grid.indices.shape[1] if m else (2 if grid.mode == "pillar" else 3)
    total = np.zeros((m, f))
    count = np.zeros(m)
    shift = np.zeros((m, k))
    for off in window_offsets(radius, k):
        nb = grid.indices + off
        ok = np.all((nb >= 0) & (nb < grid.dims), axis=1)
        keys = _linear(np.where(ok[:, None], nb, 0), grid.dims)
        pos = np.searchsorted(grid.keys, keys)
        pos = np.minimum(pos, max(m - 1, 0))
        hit = ok & (grid.keys[pos] == keys) if m else ok
        total[hit] += grid.features[pos[hit]]
        count[hit] += 1.0
        shift[hit] += off
    return total, count, shift, k


DENSE_LIMIT = 4_000_000  # bounding-box cells x channels for the dense path


def _box_sum(dense: np.ndarray, radius: int, k: int) -> np.ndarray:
    """Sum over the (2r+1)^k window around every cell via integral images."""
    out = dense
    for a in range(k):
        pad = [(0, 0)] * out.ndim
        pad[a] = (radius + 1, radius)
        c = np.cumsum(np.pad(out, pad), axis=a)
        n = out.shape[a]
        hi = np.take(c, np.arange(2 * radius + 1, 2 * radius + 1 + n), axis=a)
        lo = np.take(c, np.arange(0, n), axis=a)
        out = hi - lo
    return out


def _scan_dense(grid: VoxelGrid, radius: int):
    """Same sums as ``_scan`` from windowed sums on the occupied bounding box.

    Agrees with the sparse scan up to summation-order rounding.
    """
    m, f = grid.features.shape
    k = grid.indices.shape[1]
    lo = grid.indices.min(axis=0)
    local = grid.indices - lo
    shape = tuple(local.max(axis=0) + 1)
    # channels: features, occupancy, occupancy * index per axis
    dense = np.zeros(shape + (f + 1 + k,))
    at = tuple(local.T)
    dense[at + (slice(0, f),)] = grid.features
    dense[at + (f,)] = 1.0
    dense[at + (slice(f + 1, f + 1 + k),)] = grid.indices
    win = _box_sum(dense, radius, k)[at]
    count = np.rint(win[:, f])
    shift = win[:, f + 1:] - count[:, None] * grid.indices
    return win[:, :f], count, shift, k


def neighborhood_aggregate(grid: VoxelGrid, radius: int) -> VoxelGrid:
    """Enrich occupied cells with their occupied-neighborhood statistics.

    New feature = [own mean, mean of occupied neighbor means (self
    included), occupied count / (2r+1)^k], with k indexed axes. Only
    occupied cells are visited; neighbors are summed in lexicographic
    offset order.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    total, count, _, k = _scan(grid, radius)
    neighbor_mean = total / np.maximum(count, 1.0)[:, None]
    enriched = np.concatenate([grid.features, neighbor_mean, (count / (2 * radius + 1) ** k)[:, None]], axis=1)
    return replace(grid, features=enriched)


def neighborhood_centroid(grid: VoxelGrid, radius: int) -> np.ndarray:
    """Mean index offset to the occupied neighbors, in units of ``radius``.

    Points from a cell toward the bulk of its neighborhood; zero for
    isolated cells and for radius 0.
    """
    if radius < 0:
        raise ValueError("radius must be >= 0")
    _, count, shift, _ = _scan(grid, radius)
    return shift / (np.maximum(count, 1.0)[:, None] * max(radius, 1))


def _fast_scan(grid: VoxelGrid, radius: int):
    if len(grid) == 0 or radius < 4:
        return _scan(grid, radius)
    extent = np.prod(grid.indices.max(axis=0) - grid.indices.min(axis=0) + 1 + 2 * radius)
    if extent * (grid.features.shape[1] + 4) > DENSE_LIMIT:
        return _scan(grid, radius)
    return _scan_dense(grid, radius)


def multi_scale_features(grid: VoxelGrid, radii, centroid: bool = False) -> np.ndarray:
    """Own mean plus [neighbor mean, count] for each radius.

    With ``centroid`` set, each radius also contributes the neighbor
    centroid offset. Small grids use windowed dense sums, which match
    ``neighborhood_aggregate`` up to rounding.
    """
    parts = [grid.features]
    for r in radii:
        if r < 0:
            raise ValueError("radius must be >= 0")
        total, count, shift, k = _fast_scan(grid, r)
        parts.append(total / np.maximum(count, 1.0)[:, None])
        parts.append((count / (2 * r + 1) ** k)[:, None])
        if centroid:
            parts.append(shift / (np.maximum(count, 1.0)[:, None] * max(r, 1)))
    return np.concatenate(parts, axis=1)


def apply_detection_head(grid: VoxelGrid, heatmap_head: TinyHead, box_head: TinyHead, features=None):
    """Per-cell heatmap probability and raw box parameters.

    Box outputs are (dx, dy, dz, log l, log w, log h, bin logits..., residual).
    """
    x = grid.features if features is None else features
    if len(x) == 0:
        return np.zeros(0), np.zeros((0, box_head.out_dim))
    if heatmap_head.in_dim != x.shape[1] or box_head.in_dim != x.shape[1]:
        raise ValueError(f"head input dims do not match voxel feature dim {x.shape[1]}")
    h = sigmoid(head_forward(heatmap_head, x)[:, 0])
    return h, head_forward(box_head, x)
