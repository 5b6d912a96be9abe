"""Two-stream backbone: image conv stack with pyramid combination, BEV
residual groups with fusion insertion points, and the full detector model."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .detect import DetectionHeader, HeaderOutput
from .fusion import (FusionConfig, FusionMlp, FusionPlan, apply_fusion,
                     fuse_into_bev, plan_discrete_fusion, plan_fusion,
                     xavier_uniform)
from .geometry import BevGrid, CalibratedCamera, PointCloud, build_bev_index
from .tensor import Tensor

MODES = ("continuous", "continuous_nogeo", "discrete", "bev_only")


@dataclass
class GroupSpec:
    layers: int          # 3x3 conv count; one residual block per 2 layers
    channels: int
    stride: int


@dataclass
class BackboneConfig:
    """Desk-scale default shrinks the full-size net (layer counts
    2/4/8/12/12, channels 32/64/128/192/256) to 2-layer groups with
    8/16/32/48/64 channels; the full-size schedule stays expressible."""

    bev_groups: list[GroupSpec] = field(default_factory=lambda: [
        GroupSpec(2, 8, 1), GroupSpec(2, 16, 2), GroupSpec(2, 32, 2),
        GroupSpec(2, 48, 2), GroupSpec(2, 64, 2)])
    image_groups: list[GroupSpec] = field(default_factory=lambda: [
        GroupSpec(2, 8, 1), GroupSpec(2, 16, 2), GroupSpec(2, 32, 2),
        GroupSpec(2, 48, 2)])
    fusion_points: tuple[int, ...] = (0, 1, 2, 3)

    def __post_init__(self):
        for groups, label in ((self.bev_groups, "bev"), (self.image_groups, "image")):
            if groups[0].stride != 1:
                raise ValueError(f"first {label} group must have stride 1")
            if any(g.stride != 2 for g in groups[1:]):
                raise ValueError(f"non-first {label} groups must have stride 2")
        if any(p >= len(self.bev_groups) for p in self.fusion_points):
            raise ValueError("fusion point beyond the last BEV group")


@dataclass
class FeaturePyramid:
    scales: list[Tensor]         # per-group outputs, fine to coarse
    combined: Tensor             # merged map at the reference (finest) scale


class Conv2dLayer:
    def __init__(self, in_ch: int, out_ch: int, ksize: int, stride: int,
                 padding: int, rng: np.random.Generator, name: str):
        fan_in = in_ch * ksize * ksize
        self.weight = Tensor(xavier_uniform(rng, fan_in, out_ch,
                                            (out_ch, in_ch, ksize, ksize)),
                             requires_grad=True)
        self.bias = Tensor.zeros((out_ch,), requires_grad=True)
        self.stride = stride
        self.padding = padding
        self.name = name

    def parameters(self):
        return {f"{self.name}.weight": self.weight, f"{self.name}.bias": self.bias}

    def forward(self, x: Tensor) -> Tensor:
        return T.add_channel_bias(
            T.conv2d(x, self.weight, stride=self.stride, padding=self.padding),
            self.bias)


class ResidualBlock:
    """Two 3x3 convs with an identity skip; 1x1 projection skip on channel or
    stride change."""

    def __init__(self, in_ch: int, out_ch: int, stride: int,
                 rng: np.random.Generator, name: str):
        self.conv1 = Conv2dLayer(in_ch, out_ch, 3, stride, 1, rng, f"{name}.conv1")
        self.conv2 = Conv2dLayer(out_ch, out_ch, 3, 1, 1, rng, f"{name}.conv2")
        self.skip = None
        if in_ch != out_ch or stride != 1:
            self.skip = Conv2dLayer(in_ch, out_ch, 1, stride, 0, rng, f"{name}.skip")

    def parameters(self):
        out = {**self.conv1.parameters(), **self.conv2.parameters()}
        if self.skip is not None:
            out.update(self.skip.parameters())
        return out

    def forward(self, x: Tensor) -> Tensor:
        h = self.conv2.forward(self.conv1.forward(x).relu())
        s = self.skip.forward(x) if self.skip is not None else x
        return (h + s).relu()


class ResidualGroup:
    def __init__(self, in_ch: int, spec: GroupSpec, rng, name: str):
        blocks = max(spec.layers // 2, 1)
        self.blocks = []
        for b in range(blocks):
            stride = spec.stride if b == 0 else 1
            cin = in_ch if b == 0 else spec.channels
            self.blocks.append(ResidualBlock(cin, spec.channels, stride, rng,
                                             f"{name}.block{b}"))

    def parameters(self):
        out = {}
        for blk in self.blocks:
            out.update(blk.parameters())
        return out

    def forward(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = blk.forward(x)
        return x


class FpnCombiner:
    """Top-down merge: 1x1-project every scale, upsample coarse maps by 2 and
    add, returning the finest-resolution result."""

    def __init__(self, in_channels: list[int], out_channels: int, rng, name: str):
        self.projs = [Conv2dLayer(c, out_channels, 1, 1, 0, rng, f"{name}.proj{i}")
                      for i, c in enumerate(in_channels)]

    def parameters(self):
        out = {}
        for p in self.projs:
            out.update(p.parameters())
        return out

    def forward(self, maps: list[Tensor]) -> Tensor:
        if len(maps) != len(self.projs):
            raise ValueError(f"expected {len(self.projs)} maps, got {len(maps)}")
        for fine, coarse in zip(maps, maps[1:]):
            if fine.shape[1] != 2 * coarse.shape[1] or fine.shape[2] != 2 * coarse.shape[2]:
                raise ValueError("pyramid spatial extents must halve scale to scale")
        out = self.projs[-1].forward(maps[-1])
        for i in range(len(maps) - 2, -1, -1):
            out = self.projs[i].forward(maps[i]) + T.upsample2x(out)
        return out


def fpn_combine(maps: list[Tensor], combiner: FpnCombiner) -> Tensor:
    return combiner.forward(maps)


class ImageStream:
    """Toy image backbone: residual groups plus pyramid combination; the
    combined map is the fusion input."""

    def __init__(self, in_channels: int, cfg: BackboneConfig, out_channels: int,
                 rng, name: str = "image"):
        self.groups = []
        cin = in_channels
        for gi, spec in enumerate(cfg.image_groups):
            self.groups.append(ResidualGroup(cin, spec, rng, f"{name}.group{gi}"))
            cin = spec.channels
        self.combiner = FpnCombiner([g.channels for g in cfg.image_groups],
                                    out_channels, rng, f"{name}.fpn")
        self.cum_stride = int(np.prod([g.stride for g in cfg.image_groups]))

    def parameters(self):
        out = self.combiner.parameters()
        for g in self.groups:
            out.update(g.parameters())
        return out

    def forward(self, image_input: Tensor) -> FeaturePyramid:
        _, h, w = image_input.shape
        if h % self.cum_stride or w % self.cum_stride:
            raise ValueError(f"image dims {h}x{w} not divisible by stride {self.cum_stride}")
        scales = []
        x = image_input
        for g in self.groups:
            x = g.forward(x)
            scales.append(x)
        return FeaturePyramid(scales, self.combiner.forward(scales))


@dataclass
class ScalePlans:
    """Per-fusion-point pairing plans for a fixed scene (pure geometry)."""

    plans: dict[int, FusionPlan]


class DetectorModel:
    """Image stream + BEV stream bridged by fusion layers, plus the header."""

    def __init__(self, grid: BevGrid, backbone: BackboneConfig,
                 fusion_cfg: FusionConfig, image_in_channels: int,
                 image_feat_channels: int, bev_fpn_channels: int,
                 header_variant: str, mode: str = "continuous",
                 rng: np.random.Generator | None = None):
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.grid = grid
        self.backbone = backbone
        self.mode = mode
        self.fusion_base = fusion_cfg
        self.image_feat_channels = image_feat_channels
        self.with_fusion = mode != "bev_only"
        self.use_geo = mode == "continuous"

        self.image_stream = None
        self.fusion_mlps: dict[int, FusionMlp] = {}
        self.fusion_cfgs: dict[int, FusionConfig] = {}
        if self.with_fusion:
            self.image_stream = ImageStream(image_in_channels, backbone,
                                            image_feat_channels, rng)
            in_dim = image_feat_channels + (3 if self.use_geo else 0)
            for p in backbone.fusion_points:
                self.fusion_cfgs[p] = FusionConfig(
                    k=fusion_cfg.k, max_dist=fusion_cfg.max_dist,
                    use_geometric_feature=self.use_geo,
                    use_knn_pooling=mode != "discrete",
                    input_dim=in_dim, output_dim=backbone.bev_groups[p].channels)
                self.fusion_mlps[p] = FusionMlp(in_dim,
                                                backbone.bev_groups[p].channels,
                                                rng, name=f"fusion{p}")

        self.bev_groups = []
        cin = grid.nz
        for gi, spec in enumerate(backbone.bev_groups):
            self.bev_groups.append(ResidualGroup(cin, spec, rng, f"bev.group{gi}"))
            cin = spec.channels
        # final map merges the last three groups (or all, when fewer exist)
        self.num_combined = min(3, len(backbone.bev_groups))
        self.bev_combiner = FpnCombiner(
            [g.channels for g in backbone.bev_groups[-self.num_combined:]],
            bev_fpn_channels, rng, "bev.fpn")
        self.header = DetectionHeader(bev_fpn_channels, header_variant, rng=rng)

        # cumulative planar stride in front of each BEV group's output
        strides, cum = [], 1
        for spec in backbone.bev_groups:
            cum *= spec.stride
            strides.append(cum)
        self.bev_cum_strides = strides
        self.output_grid = grid.downsample(strides[-self.num_combined])

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.image_stream is not None:
            out.update(self.image_stream.parameters())
        for mlp in self.fusion_mlps.values():
            out.update(mlp.parameters())
        for g in self.bev_groups:
            out.update(g.parameters())
        out.update(self.bev_combiner.parameters())
        out.update(self.header.parameters())
        return out

    def load_parameters(self, values: dict[str, np.ndarray]):
        params = self.parameters()
        missing = set(params) - set(values)
        extra = set(values) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint mismatch: missing {sorted(missing)}, "
                             f"unexpected {sorted(extra)}")
        for name, p in params.items():
            if p.data.shape != values[name].shape:
                raise ValueError(f"checkpoint shape mismatch for {name}")
            p.data[:] = values[name]

    def make_plans(self, cloud: PointCloud, cam: CalibratedCamera) -> ScalePlans:
        """Precompute neighbor pairings for every fusion insertion point."""
        plans = {}
        if self.with_fusion:
            index = build_bev_index(cloud)
            for p in self.backbone.fusion_points:
                scale_grid = self.grid.downsample(self.bev_cum_strides[p])
                cfg = self.fusion_cfgs[p]
                if self.mode == "discrete":
                    plans[p] = plan_discrete_fusion(cloud, cam, scale_grid, cfg)
                else:
                    plans[p] = plan_fusion(cloud, cam, scale_grid, cfg, index)
        return ScalePlans(plans)

    def forward(self, bev_input: Tensor, image_input: Tensor | None,
                plans: ScalePlans | None) -> HeaderOutput:
        image_combined = None
        if self.with_fusion:
            if image_input is None or plans is None:
                raise ValueError("fusion modes need the image input and plans")
            image_combined = self.image_stream.forward(image_input).combined
        x = bev_input
        outs = []
        for gi, group in enumerate(self.bev_groups):
            x = group.forward(x)
            if self.with_fusion and gi in self.fusion_cfgs:
                fused = apply_fusion(image_combined, plans.plans[gi],
                                     self.fusion_cfgs[gi], self.fusion_mlps[gi])
                x = fuse_into_bev(x, fused)
            outs.append(x)
        final = self.bev_combiner.forward(outs[-self.num_combined:])
        return self.header.forward(final)
