"""Continuous fusion: project image features onto a dense BEV raster through
the K nearest LIDAR points and an offset-conditioned shared MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .geometry import (BevGrid, BevKdTree, CalibratedCamera, PointCloud,
                       build_bev_index, project_points)
from .tensor import Tensor


class FusionConfigError(ValueError):
    pass


@dataclass
class FusionConfig:
    """Knobs of the fusion layer; defaults follow the best ablation setting
    (k=1, max_dist=10m, geometric feature on)."""

    k: int = 1
    max_dist: float = 10.0
    use_geometric_feature: bool = True
    use_knn_pooling: bool = True
    input_dim: int = 8          # D_i: image channels (+3 when geometric feature on)
    output_dim: int = 8         # D_o: BEV channels at the insertion point

    def __post_init__(self):
        if self.k < 1:
            raise FusionConfigError("k must be >= 1")
        if self.input_dim < 1 or self.output_dim < 1:
            raise FusionConfigError("input_dim and output_dim must be >= 1")

    def image_channels(self) -> int:
        return self.input_dim - 3 if self.use_geometric_feature else self.input_dim


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


class FusionMlp:
    """Shared 3-layer perceptron: two hidden layers of the input width, then a
    linear output layer; rectifier between layers, none at the end."""

    def __init__(self, input_dim: int, output_dim: int,
                 rng: np.random.Generator | None = None, name: str = "fusion_mlp"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim = input_dim
        self.output_dim = output_dim
        self.name = name
        d, o = input_dim, output_dim
        self.w1 = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
        self.b1 = Tensor.zeros((1, d), requires_grad=True)
        self.w2 = Tensor(xavier_uniform(rng, d, d), requires_grad=True)
        self.b2 = Tensor.zeros((1, d), requires_grad=True)
        self.w3 = Tensor(xavier_uniform(rng, d, o), requires_grad=True)
        self.b3 = Tensor.zeros((1, o), requires_grad=True)

    def parameters(self) -> dict[str, Tensor]:
        return {f"{self.name}.{k}": v for k, v in
                (("w1", self.w1), ("b1", self.b1), ("w2", self.w2),
                 ("b2", self.b2), ("w3", self.w3), ("b3", self.b3))}

    def zero_output_layer(self):
        """Zero the last affine layer so the MLP output is identically zero."""
        self.w3.data[:] = 0.0
        self.b3.data[:] = 0.0

    def forward(self, x: Tensor) -> Tensor:
        h = T.add_rowvec(T.matmul(x, self.w1), self.b1).relu()
        h = T.add_rowvec(T.matmul(h, self.w2), self.b2).relu()
        return T.add_rowvec(T.matmul(h, self.w3), self.b3)


@dataclass
class FusionPlan:
    """Precomputed (pixel, neighbor) pairing for one cloud/camera/raster triple.

    Pure geometry: reusable across training steps as long as the cloud, the
    calibration and the target raster stay fixed.
    """

    pair_pixel: np.ndarray      # P, flat index into the ny*nx raster
    pair_uv: np.ndarray         # P x 2, image coordinates (invalid pushed off-image)
    pair_offset: np.ndarray     # P x 3, x_j - x_i in meters
    ny: int
    nx: int


# off-image sentinel: bilinear sampling returns the zero vector there
_OFF_IMAGE = np.array([-10.0, -10.0])


def plan_fusion(cloud: PointCloud, cam: CalibratedCamera, grid: BevGrid,
                cfg: FusionConfig, index: BevKdTree | None = None) -> FusionPlan:
    """Gather the <= k nearest in-range LIDAR points for every BEV pixel."""
    centers = grid.pixel_centers().reshape(-1, 2)         # (ny*nx) x 2
    npix = centers.shape[0]
    if len(cloud) == 0:
        empty = np.zeros((0,))
        return FusionPlan(empty.astype(np.intp), np.zeros((0, 2)), np.zeros((0, 3)),
                          grid.ny, grid.nx)
    uv, valid = project_points(cloud, cam)
    index = index if index is not None else build_bev_index(cloud)
    pix, uvs, offs = [], [], []
    for i in range(npix):
        for j in index.query(centers[i], cfg.k, cfg.max_dist):
            if not valid[j] and not cfg.use_geometric_feature:
                continue      # nothing to contribute without the offset input
            pix.append(i)
            uvs.append(uv[j] if valid[j] else _OFF_IMAGE)
            # target pixel sits on the z=0 reference plane
            offs.append(cloud.points[j] - np.array([centers[i, 0], centers[i, 1], 0.0]))
    return FusionPlan(np.array(pix, dtype=np.intp),
                      np.array(uvs).reshape(-1, 2),
                      np.array(offs).reshape(-1, 3), grid.ny, grid.nx)


def _check_dims(image_features: Tensor, cfg: FusionConfig, mlp: FusionMlp):
    c = image_features.shape[0]
    if cfg.image_channels() != c:
        raise FusionConfigError(
            f"config expects {cfg.image_channels()} image channels, feature map has {c}")
    if mlp.input_dim != cfg.input_dim or mlp.output_dim != cfg.output_dim:
        raise FusionConfigError(
            f"MLP dims ({mlp.input_dim}->{mlp.output_dim}) do not match config "
            f"({cfg.input_dim}->{cfg.output_dim})")


def apply_fusion(image_features: Tensor, plan: FusionPlan, cfg: FusionConfig,
                 mlp: FusionMlp) -> Tensor:
    """Run the shared MLP over all (pixel, neighbor) pairs and sum per pixel."""
    _check_dims(image_features, cfg, mlp)
    npix = plan.ny * plan.nx
    if plan.pair_pixel.size == 0:
        return Tensor.zeros((cfg.output_dim, plan.ny, plan.nx))
    feats = T.bilinear_sample(image_features, plan.pair_uv)     # P x C
    if cfg.use_geometric_feature:
        feats = T.concat([feats, Tensor(plan.pair_offset)], axis=1)
    h = mlp.forward(feats)                                      # P x D_o
    out = T.scatter_add_rows(h, plan.pair_pixel, npix)          # npix x D_o
    return out.reshape(plan.ny, plan.nx, cfg.output_dim).transpose((2, 0, 1))


def continuous_fusion_forward(image_features: Tensor, cloud: PointCloud,
                              cam: CalibratedCamera, grid: BevGrid,
                              cfg: FusionConfig, mlp: FusionMlp,
                              index: BevKdTree | None = None) -> Tensor:
    """Dense BEV feature map h_i = sum_j MLP(concat[f_j, x_j - x_i])."""
    _check_dims(image_features, cfg, mlp)
    return apply_fusion(image_features, plan_fusion(cloud, cam, grid, cfg, index),
                        cfg, mlp)


def plan_discrete_fusion(cloud: PointCloud, cam: CalibratedCamera, grid: BevGrid,
                         cfg: FusionConfig) -> FusionPlan:
    """Ablation pairing: each point feeds only the BEV pixel it falls into."""
    if len(cloud) == 0:
        return FusionPlan(np.zeros((0,), dtype=np.intp), np.zeros((0, 2)),
                          np.zeros((0, 3)), grid.ny, grid.nx)
    uv, valid = project_points(cloud, cam)
    cx, cy, _ = grid.cell
    ix = np.floor((cloud.points[:, 0] - grid.x_range[0]) / cx).astype(np.intp)
    iy = np.floor((cloud.points[:, 1] - grid.y_range[0]) / cy).astype(np.intp)
    keep = (ix >= 0) & (ix < grid.nx) & (iy >= 0) & (iy < grid.ny) & valid
    pix = iy[keep] * grid.nx + ix[keep]
    return FusionPlan(pix, uv[keep], np.zeros((keep.sum(), 3)), grid.ny, grid.nx)


def discrete_fusion_forward(image_features: Tensor, cloud: PointCloud,
                            cam: CalibratedCamera, grid: BevGrid,
                            cfg: FusionConfig, mlp: FusionMlp) -> Tensor:
    """Matched-pixel-pair fusion without KNN pooling or geometric features."""
    if cfg.use_geometric_feature:
        raise FusionConfigError("discrete fusion carries no geometric feature")
    plan = plan_discrete_fusion(cloud, cam, grid, cfg)
    return apply_fusion(image_features, plan, cfg, mlp)


def fuse_into_bev(bev_features: Tensor, fused: Tensor) -> Tensor:
    """Element-wise summation of the fused map into the BEV stream."""
    if bev_features.shape != fused.shape:
        raise ValueError(f"shape mismatch: {bev_features.shape} vs {fused.shape}")
    return bev_features + fused


def parametric_continuous_conv(points: PointCloud, features: Tensor,
                               queries: np.ndarray, k: int,
                               mlp_w: FusionMlp) -> Tensor:
    """Reference continuous convolution: h_i = sum_j MLP(x_i - x_j) * f_j.

    The weight-generating MLP maps a 3D offset to one scalar weight per
    feature channel.
    """
    queries = np.asarray(queries, dtype=np.float64).reshape(-1, 3)
    n, c = features.shape
    if mlp_w.input_dim != 3 or mlp_w.output_dim != c:
        raise FusionConfigError("weight MLP must map 3D offsets to C channel weights")
    pix, offs = [], []
    for i, q in enumerate(queries):
        d = np.linalg.norm(points.points - q, axis=1)
        order = np.argsort(d, kind="stable")[:k]
        for j in order:
            pix.append((i, int(j)))
            offs.append(q - points.points[j])
    if not pix:
        return Tensor.zeros((queries.shape[0], c))
    qi = np.array([p[0] for p in pix], dtype=np.intp)
    ji = np.array([p[1] for p in pix], dtype=np.intp)
    w = mlp_w.forward(Tensor(np.array(offs)))          # P x C
    f = T.gather_rows(features, ji)                    # P x C
    return T.scatter_add_rows(w * f, qi, queries.shape[0])
