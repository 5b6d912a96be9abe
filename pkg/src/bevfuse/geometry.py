"""Coordinate-frame math: LIDAR->camera projection, BEV voxelization, KNN on
the BEV plane, and bilinear sampling of image feature maps."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, bilinear_sample as _bilinear_many


@dataclass
class PointCloud:
    """LIDAR returns in the sensor frame, meters. Index identifies a point."""

    points: np.ndarray                       # N x 3
    intensity: np.ndarray | None = None      # N, optional

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be N x 3, got {pts.shape}")
        self.points = pts
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)

    def __len__(self):
        return self.points.shape[0]


@dataclass
class CalibratedCamera:
    """3x4 projective map from homogeneous LIDAR-frame points to the image plane."""

    projection: np.ndarray                   # 3 x 4
    image_size: tuple[int, int]              # (height, width) pixels

    def __post_init__(self):
        self.projection = np.asarray(self.projection, dtype=np.float64).reshape(3, 4)
        if np.linalg.matrix_rank(self.projection) < 3:
            raise ValueError("camera projection matrix must have rank 3")


@dataclass
class BevGrid:
    """Metric <-> cell mapping for the bird's-eye-view raster.

    Voxel nodes sit at cell centers; the first node along an axis is at
    range_min + cell/2. ``nx`` spans x (forward), ``ny`` spans y (lateral),
    ``nz`` spans z (up).
    """

    x_range: tuple[float, float]
    y_range: tuple[float, float]
    z_range: tuple[float, float]
    nx: int
    ny: int
    nz: int

    def __post_init__(self):
        for lo, hi in (self.x_range, self.y_range, self.z_range):
            if not hi > lo:
                raise ValueError("BevGrid ranges must be non-degenerate")
        if min(self.nx, self.ny, self.nz) < 1:
            raise ValueError("BevGrid extents must be positive")

    @property
    def cell(self) -> tuple[float, float, float]:
        return ((self.x_range[1] - self.x_range[0]) / self.nx,
                (self.y_range[1] - self.y_range[0]) / self.ny,
                (self.z_range[1] - self.z_range[0]) / self.nz)

    def downsample(self, factor: int) -> "BevGrid":
        """Same metric extents at 1/factor the planar resolution."""
        if self.nx % factor or self.ny % factor:
            raise ValueError(f"grid {self.nx}x{self.ny} not divisible by {factor}")
        return BevGrid(self.x_range, self.y_range, self.z_range,
                       self.nx // factor, self.ny // factor, self.nz)

    def pixel_centers(self) -> np.ndarray:
        """Metric (x, y) center of every BEV pixel, shape ny x nx x 2."""
        cx, cy, _ = self.cell
        xs = self.x_range[0] + (np.arange(self.nx) + 0.5) * cx
        ys = self.y_range[0] + (np.arange(self.ny) + 0.5) * cy
        gx, gy = np.meshgrid(xs, ys)         # ny x nx
        return np.stack([gx, gy], axis=-1)


def project_points(cloud: PointCloud, cam: CalibratedCamera) -> tuple[np.ndarray, np.ndarray]:
    """Project LIDAR points to continuous image coordinates.

    Returns (uv, valid) where uv is N x 2 sub-pixel coordinates and valid is
    false for points behind the camera or outside the image bounds. Invalid
    points keep their (possibly meaningless) uv values; callers must mask.
    """
    n = len(cloud)
    hom = np.concatenate([cloud.points, np.ones((n, 1))], axis=1)
    proj = hom @ cam.projection.T             # N x 3
    depth = proj[:, 2]
    safe = np.where(np.abs(depth) > 1e-12, depth, 1e-12)
    uv = proj[:, :2] / safe[:, None]
    h, w = cam.image_size
    valid = (depth > 0) & (uv[:, 0] >= 0) & (uv[:, 0] <= w - 1) \
        & (uv[:, 1] >= 0) & (uv[:, 1] <= h - 1)
    return uv, valid


def voxelize(cloud: PointCloud, grid: BevGrid) -> Tensor:
    """Rasterize a point cloud into an nz x ny x nx occupancy-mass volume.

    Each in-range point spreads unit mass over the 8 surrounding voxel nodes
    with trilinear weights; corner weights falling outside the grid are
    clipped away.
    """
    out = np.zeros((grid.nz, grid.ny, grid.nx))
    if len(cloud) == 0:
        return Tensor(out)
    cx, cy, cz = grid.cell
    # fractional node coordinates: node i sits at range_min + (i + 0.5) * cell
    fx = (cloud.points[:, 0] - grid.x_range[0]) / cx - 0.5
    fy = (cloud.points[:, 1] - grid.y_range[0]) / cy - 0.5
    fz = (cloud.points[:, 2] - grid.z_range[0]) / cz - 0.5
    i0 = np.floor(fx).astype(np.intp)
    j0 = np.floor(fy).astype(np.intp)
    k0 = np.floor(fz).astype(np.intp)
    dx, dy, dz = fx - i0, fy - j0, fz - k0
    for di in (0, 1):
        wi = dx if di else 1 - dx
        ii = i0 + di
        for dj in (0, 1):
            wj = dy if dj else 1 - dy
            jj = j0 + dj
            for dk in (0, 1):
                wk = dz if dk else 1 - dz
                kk = k0 + dk
                wgt = wi * wj * wk
                ok = (ii >= 0) & (ii < grid.nx) & (jj >= 0) & (jj < grid.ny) \
                    & (kk >= 0) & (kk < grid.nz) & (wgt > 0)
                np.add.at(out, (kk[ok], jj[ok], ii[ok]), wgt[ok])
    return Tensor(out)


def knn_bev(query, cloud: PointCloud, k: int, max_dist: float = np.inf) -> list[int]:
    """Brute-force k nearest points to a (x, y) query over the 2D BEV plane.

    Results are sorted by ascending distance, ties broken by lower point
    index; only points within max_dist qualify.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if len(cloud) == 0:
        return []
    q = np.asarray(query, dtype=np.float64)
    d = np.hypot(cloud.points[:, 0] - q[0], cloud.points[:, 1] - q[1])
    order = np.argsort(d, kind="stable")      # stable sort = index tie-break
    return [int(i) for i in order[:k] if d[i] <= max_dist]


class BevKdTree:
    """2D k-d tree over the (x, y) coordinates of a point cloud.

    Query results match the brute-force ``knn_bev`` definition exactly,
    including the lower-index tie-break. Immutable after construction.
    """

    __slots__ = ("xy", "_idx", "_split", "_left", "_right", "_leaf_size")

    def __init__(self, cloud: PointCloud, leaf_size: int = 16):
        self.xy = cloud.points[:, :2].copy()
        self._leaf_size = leaf_size
        n = self.xy.shape[0]
        # flat node arrays: each node is (axis, split value, child ids) or a leaf slice
        self._idx = np.arange(n, dtype=np.intp)
        self._split = []
        self._left = []
        self._right = []
        if n:
            self._build(0, n, 0)

    def _build(self, lo: int, hi: int, depth: int) -> int:
        node = len(self._split)
        self._split.append(None)
        self._left.append(-1)
        self._right.append(-1)
        if hi - lo <= self._leaf_size:
            self._split[node] = ("leaf", lo, hi)
            return node
        axis = depth % 2
        seg = self._idx[lo:hi]
        mid = (hi - lo) // 2
        part = np.argpartition(self.xy[seg, axis], mid)
        self._idx[lo:hi] = seg[part]
        split_val = self.xy[self._idx[lo + mid], axis]
        self._split[node] = ("node", axis, split_val, lo + mid)
        self._left[node] = self._build(lo, lo + mid, depth + 1)
        self._right[node] = self._build(lo + mid, hi, depth + 1)
        return node

    def query(self, query, k: int, max_dist: float = np.inf) -> list[int]:
        if k < 1:
            raise ValueError("k must be >= 1")
        if self.xy.shape[0] == 0:
            return []
        qx, qy = float(query[0]), float(query[1])
        best: list[tuple[float, int]] = []     # kept sorted, worst last

        def consider(span):
            lo, hi = span
            seg = self._idx[lo:hi]
            d = np.hypot(self.xy[seg, 0] - qx, self.xy[seg, 1] - qy)
            for dist, idx in zip(d, seg):
                if dist > max_dist:
                    continue
                key = (dist, int(idx))
                if len(best) < k:
                    best.append(key)
                    best.sort()
                elif key < best[-1]:
                    best[-1] = key
                    best.sort()

        def visit(node):
            kind = self._split[node]
            if kind[0] == "leaf":
                consider(kind[1:])
                return
            _, axis, split_val, _ = kind
            qv = qx if axis == 0 else qy
            near, far = (self._left[node], self._right[node]) if qv < split_val \
                else (self._right[node], self._left[node])
            visit(near)
            bound = best[-1][0] if len(best) == k else max_dist
            # <= so equal-distance candidates across the plane can still win ties
            if abs(qv - split_val) <= min(bound, max_dist):
                visit(far)

        visit(0)
        return [idx for _, idx in best]

    def query_batch(self, queries: np.ndarray, k: int,
                    max_dist: float = np.inf) -> list[list[int]]:
        return [self.query(q, k, max_dist) for q in np.asarray(queries).reshape(-1, 2)]


def build_bev_index(cloud: PointCloud) -> BevKdTree:
    return BevKdTree(cloud)


def bilinear_sample(feature_map: Tensor, u: float, v: float) -> Tensor:
    """Bilinear blend of the 4 pixels around continuous (u, v); zero outside."""
    return _bilinear_many(feature_map, np.array([[u, v]])).reshape(feature_map.shape[0])


def bilinear_sample_many(feature_map: Tensor, uv: np.ndarray) -> Tensor:
    """Batched bilinear sampling, N x 2 pixel coordinates -> N x C features."""
    return _bilinear_many(feature_map, uv)
