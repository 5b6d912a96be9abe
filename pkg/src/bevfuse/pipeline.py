"""Config-driven training, evaluation, ablation, gradient-check and benchmark
pipelines. Everything is deterministic given the config seed."""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .backbone import DetectorModel, ScalePlans
from .config import ExperimentConfig
from .data import (AugmentationConfig, SceneSample, augment, generate_dataset,
                   load_dataset, load_kitti_frame)
from .detect import (NUM_REG, REG_INDICES, Anchor, DetectionBox, decode_detections,
                     encode_targets, make_anchors, nms)
from .evaluation import evaluate_frames, evaluate_pr, piecewise_range_ap
from .fusion import FusionConfig, FusionMlp, continuous_fusion_forward
from .geometry import BevGrid, PointCloud, build_bev_index, knn_bev, voxelize
from .losses import NEGATIVE, hard_negative_mining, total_loss
from .tensor import Adam, Tensor, save_checkpoint


class NumericError(RuntimeError):
    """Training hit a non-finite loss."""


def build_model(cfg: ExperimentConfig, rng: np.random.Generator | None = None) -> DetectorModel:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    return DetectorModel(
        grid=cfg.grid, backbone=cfg.backbone, fusion_cfg=cfg.fusion,
        image_in_channels=cfg.data.synthetic.image_shape[0],
        image_feat_channels=cfg.image_feat_channels,
        bev_fpn_channels=cfg.bev_fpn_channels,
        header_variant=cfg.variant, mode=cfg.mode, rng=rng)


def build_scenes(cfg: ExperimentConfig) -> list[SceneSample]:
    d = cfg.data
    if d.source == "synthetic":
        return generate_dataset(d.synthetic, d.n_scenes)
    if d.source == "manifest":
        return load_dataset(d.manifest)
    if d.source == "kitti":
        return [load_kitti_frame(fr["velodyne"], fr["calib"], fr["labels"])
                for fr in d.kitti_frames or []]
    raise ValueError(f"unknown data source {d.source!r}")


@dataclass
class PreparedScene:
    sample: SceneSample
    bev_input: Tensor
    plans: ScalePlans
    pos_idx: np.ndarray
    neg_idx: np.ndarray
    reg_targets: np.ndarray         # n_pos x R


def _reg_target_rows(cfg: ExperimentConfig, anchors: list[Anchor],
                     pos_idx: np.ndarray, labels: np.ndarray,
                     gts: list[DetectionBox]) -> np.ndarray:
    rows = []
    for ai in pos_idx:
        gt = gts[labels[ai]]
        enc = encode_targets(gt, anchors[ai], center_norm=cfg.loss.center_norm,
                             wrap_orientation=cfg.loss.wrap_orientation)
        row = enc[list(REG_INDICES[cfg.variant])]
        if cfg.variant == "kitti3d":
            row = np.concatenate([row, [gt.height2d]])
        rows.append(row)
    return np.array(rows).reshape(-1, NUM_REG[cfg.variant])


def prepare_scene(model: DetectorModel, cfg: ExperimentConfig,
                  anchors: list[Anchor], sample: SceneSample) -> PreparedScene:
    labels = _assign(cfg, anchors, sample.gt_boxes)
    pos_idx = np.flatnonzero(labels >= 0)
    neg_idx = np.flatnonzero(labels == NEGATIVE)
    return PreparedScene(
        sample=sample,
        bev_input=voxelize(sample.cloud, cfg.grid),
        plans=model.make_plans(sample.cloud, sample.cam),
        pos_idx=pos_idx, neg_idx=neg_idx,
        reg_targets=_reg_target_rows(cfg, anchors, pos_idx, labels, sample.gt_boxes))


def _assign(cfg: ExperimentConfig, anchors, gts):
    from .losses import assign_anchors
    return assign_anchors(anchors, gts, cfg.assignment())


def _selectors(num_reg: int):
    e_cls = np.zeros((1 + num_reg, 1))
    e_cls[0, 0] = 1.0
    e_reg = np.zeros((1 + num_reg, num_reg))
    e_reg[1:, :] = np.eye(num_reg)
    return Tensor(e_cls), Tensor(e_reg)


def scene_loss(model: DetectorModel, cfg: ExperimentConfig, prep: PreparedScene,
               mining_rng: np.random.Generator,
               mined_override: np.ndarray | None = None):
    """Forward one scene and build its multi-task loss breakdown."""
    header = model.forward(prep.bev_input, prep.sample.image_feature_input,
                           prep.plans)
    flat = header.flat()
    e_cls, e_reg = _selectors(header.num_reg)
    n_pos = prep.pos_idx.size
    if mined_override is not None:
        mined = mined_override
    else:
        scores_np = 1.0 / (1.0 + np.exp(-np.clip(flat.data[:, 0], -500, 500)))
        k = cfg.assignment().topk(n_pos)
        mined = hard_negative_mining(prep.neg_idx, scores_np, k,
                                     cfg.assignment().neg_sample_fraction,
                                     mining_rng)
    selected = np.concatenate([prep.pos_idx, mined]).astype(np.intp)
    cls_labels = np.concatenate([np.ones(n_pos), np.zeros(mined.size)])
    sel_rows = T.gather_rows(flat, selected)
    logits = T.matmul(sel_rows, e_cls).reshape(selected.size)
    cls_scores = logits.sigmoid()
    if n_pos:
        pos_rows = T.gather_rows(flat, prep.pos_idx)
        reg_pred = T.matmul(pos_rows, e_reg)
    else:
        reg_pred = Tensor.zeros((0, header.num_reg))
    return total_loss(cls_scores, cls_labels, reg_pred, prep.reg_targets,
                      alpha=cfg.loss.alpha)


def detect_scene(model: DetectorModel, cfg: ExperimentConfig,
                 anchors: list[Anchor], prep: PreparedScene) -> list[DetectionBox]:
    header = model.forward(prep.bev_input, prep.sample.image_feature_input,
                           prep.plans)
    boxes = decode_detections(header, anchors, center_norm=cfg.loss.center_norm)
    return nms(boxes, iou_threshold=cfg.eval.nms_iou,
               score_threshold=cfg.eval.score_threshold,
               max_out=cfg.eval.nms_max_out)


def evaluate_model(model: DetectorModel, cfg: ExperimentConfig,
                   anchors: list[Anchor], preps: list[PreparedScene]) -> dict:
    frames = [(detect_scene(model, cfg, anchors, p), p.sample.gt_boxes)
              for p in preps]
    ecfg = cfg.eval.eval_config()
    ap = evaluate_frames(frames, ecfg)
    report = {
        "iou_kind": ecfg.iou_kind,
        "iou_threshold": ecfg.iou_threshold,
        "ap_points": ecfg.ap_points,
        "num_frames": len(frames),
        "num_gt": sum(len(g) for _, g in frames),
        "num_detections": sum(len(d) for d, _ in frames),
        "ap": ap,
    }
    curve = evaluate_pr(frames, ecfg)
    if curve is not None:
        report["pr_curve"] = {"recall": [round(float(r), 6) for r in curve.recalls],
                              "precision": [round(float(p), 6) for p in curve.precisions]}
    if ecfg.range_bins:
        all_dets = [d for ds, _ in frames for d in ds]
        all_gts = [g for _, gs in frames for g in gs]
        report["range_ap"] = [
            {"bin": list(b), "ap": ap_} for b, ap_ in
            piecewise_range_ap(all_dets, all_gts, ecfg)]
    return report


def _lr_at(step: int, cfg: ExperimentConfig) -> float:
    opt = cfg.optimizer
    lr = opt.lr
    for frac in opt.decay_milestones:
        if step >= frac * opt.steps:
            lr *= opt.decay_factor
    return lr


def train_run(cfg: ExperimentConfig, out_dir: str) -> dict:
    """Full training run: writes resolved config, per-step loss log, final
    checkpoint and training-set evaluation into ``out_dir``."""
    from .config import save_config
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.yaml"))

    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg, rng)
    scenes = build_scenes(cfg)
    anchors = make_anchors(model.output_grid, cfg.anchor.size, cfg.anchor.z)
    static_preps = [prepare_scene(model, cfg, anchors, s) for s in scenes]

    params = model.parameters()
    opt = Adam(params.values(), lr=cfg.optimizer.lr, betas=cfg.optimizer.betas,
               eps=cfg.optimizer.eps)
    log_path = os.path.join(out_dir, "train_log.jsonl")
    first_loss = last_loss = None
    with open(log_path, "w") as log:
        for step in range(cfg.optimizer.steps):
            opt.lr = _lr_at(step, cfg)
            if cfg.data.augment is not None:
                preps = [prepare_scene(model, cfg, anchors,
                                       augment(s, cfg.data.augment,
                                               seed=hash((cfg.seed, step, i)) % 2 ** 32))
                         for i, s in enumerate(scenes)]
            else:
                preps = static_preps
            breakdowns = []
            for i, prep in enumerate(preps):
                mining_rng = np.random.default_rng([cfg.seed, 7, step, i])
                breakdowns.append(scene_loss(model, cfg, prep, mining_rng))
            total = breakdowns[0].total
            for b in breakdowns[1:]:
                total = total + b.total
            total = total / float(len(breakdowns))
            value = float(total.data)
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss at step {step}")
            rec = {"step": step,
                   "L": value,
                   "L_cls": float(np.mean([b.l_cls for b in breakdowns])),
                   "L_reg": float(np.mean([b.l_reg for b in breakdowns])),
                   "N": int(sum(b.n for b in breakdowns)),
                   "N_pos": int(sum(b.n_pos for b in breakdowns))}
            log.write(json.dumps(rec, sort_keys=True) + "\n")
            first_loss = value if first_loss is None else first_loss
            last_loss = value
            opt.zero_grad()
            total.backward()
            opt.step()
            for name, p in params.items():
                if not np.isfinite(p.data).all():
                    raise NumericError(
                        f"non-finite parameter {name} after step {step}")
            every = cfg.optimizer.checkpoint_every
            if every and (step + 1) % every == 0:
                save_checkpoint(params, os.path.join(out_dir, f"ckpt_{step + 1:06d}.bin"))
    save_checkpoint(params, os.path.join(out_dir, "ckpt_final.bin"))

    report = evaluate_model(model, cfg, anchors, static_preps)
    report["initial_loss"] = first_loss
    report["final_loss"] = last_loss
    with open(os.path.join(out_dir, "final_metrics.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report


def eval_run(cfg: ExperimentConfig, checkpoint_path: str, out_dir: str) -> dict:
    """Evaluate a checkpoint on the configured dataset."""
    from .config import save_config
    from .tensor import load_checkpoint
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.yaml"))
    model = build_model(cfg)
    model.load_parameters(load_checkpoint(checkpoint_path))
    scenes = build_scenes(cfg)
    anchors = make_anchors(model.output_grid, cfg.anchor.size, cfg.anchor.z)
    preps = [prepare_scene(model, cfg, anchors, s) for s in scenes]
    report = evaluate_model(model, cfg, anchors, preps)
    with open(os.path.join(out_dir, "eval_report.json"), "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
    return report


ABLATION_VARIANTS = ("bev_only", "discrete", "continuous_nogeo", "continuous")


def ablate_run(cfg: ExperimentConfig, out_dir: str,
               variants=ABLATION_VARIANTS,
               knn_grid: list[tuple[int, float]] | None = None) -> list[dict]:
    """Train each fusion variant (optionally over a (k, d) grid) with the
    shared seed and data; emit one comparison row per run."""
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    for variant in variants:
        grid = knn_grid if (knn_grid and variant.startswith("continuous")) \
            else [(cfg.fusion.k, cfg.fusion.max_dist)]
        for k, d in grid:
            run_cfg = replace(cfg, mode=variant,
                              fusion=replace(cfg.fusion, k=k, max_dist=d))
            tag = f"{variant}_k{k}_d{d:g}"
            report = train_run(run_cfg, os.path.join(out_dir, tag))
            rows.append({"variant": variant, "k": k, "max_dist": d,
                         "ap": report["ap"], "final_loss": report["final_loss"]})
    with open(os.path.join(out_dir, "ablation.json"), "w") as f:
        json.dump(rows, f, indent=2, sort_keys=True)
    return rows


# -- gradient-check suite ------------------------------------------------------

def _jitter_biases(params: dict, rng: np.random.Generator):
    """Zero-initialized biases sit exactly on the rectifier kink whenever an
    input patch is all zero, which breaks central differences; move them."""
    for name, p in params.items():
        if name.endswith(("bias", "b1", "b2", "b3")):
            p.data += rng.uniform(0.05, 0.15, p.data.shape) * \
                np.where(rng.random(p.data.shape) < 0.5, -1.0, 1.0)


def run_gradcheck(rtol: float = 1e-4, seed: int = 0) -> list[tuple[str, float, bool]]:
    """Finite-difference checks for every registered differentiable op plus an
    end-to-end miniature model; returns (name, max rel err, passed) rows."""
    from .gradcheck import max_rel_error, numeric_grad
    rng = np.random.default_rng(seed)
    results = []

    def check(name, make_loss, params):
        for p in params:
            p.grad = None
        make_loss().backward()
        worst = 0.0
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            worst = max(worst, max_rel_error(analytic, numeric_grad(make_loss, p)))
        results.append((name, worst, worst < rtol))

    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
    check("matmul", lambda: (T.matmul(a, b) * T.matmul(a, b)).sum(), [a, b])

    x = Tensor(rng.standard_normal((2, 5, 5)), requires_grad=True)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    check("conv2d", lambda: (T.conv2d(x, w, stride=2, padding=1) ** 2.0).sum(), [x, w])

    e = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    f = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    check("elementwise", lambda: ((e * f + e).relu().sigmoid()).sum(), [e, f])
    check("concat", lambda: (T.concat([e, f], axis=1) ** 2.0).sum(), [e, f])
    idx = np.array([0, 2, 2, 3])
    check("gather_rows", lambda: (T.gather_rows(e, idx) * T.gather_rows(f, idx)).sum(),
          [e, f])
    check("scatter_add_rows", lambda: (T.scatter_add_rows(e, idx, 6) ** 2.0).sum(), [e])
    bias = Tensor(rng.standard_normal((1, 3)), requires_grad=True)
    check("add_rowvec", lambda: (T.add_rowvec(e, bias) ** 2.0).sum(), [e, bias])
    cb = Tensor(rng.standard_normal(2), requires_grad=True)
    check("add_channel_bias", lambda: (T.add_channel_bias(x, cb) ** 2.0).sum(), [x, cb])
    check("upsample2x", lambda: (T.upsample2x(x) ** 2.0).sum(), [x])
    fm = Tensor(rng.standard_normal((2, 4, 6)), requires_grad=True)
    uv = rng.uniform(-0.5, 5.5, (12, 2))
    check("bilinear_sample", lambda: (T.bilinear_sample(fm, uv) ** 2.0).sum(), [fm])
    check("reshape_transpose",
          lambda: (x.reshape(5, 5, 2).transpose((2, 0, 1)) ** 2.0).sum(), [x])

    # continuous fusion layer on a tiny instance
    from .geometry import CalibratedCamera
    from .data import make_forward_camera
    cam = make_forward_camera((6, 8), (3.0, 3.0))
    cloud = PointCloud(rng.uniform([2, -2, 0], [6, 2, 1.5], (5, 3)))
    grid = BevGrid((0, 8), (-4, 4), (0, 2), 4, 4, 1)
    fcfg = FusionConfig(k=2, max_dist=10.0, input_dim=5, output_dim=3)
    img = Tensor(rng.standard_normal((2, 6, 8)), requires_grad=True)
    mlp = FusionMlp(5, 3, rng)
    fusion_params = [img] + list(mlp.parameters().values())
    _jitter_biases(mlp.parameters(), rng)
    check("continuous_fusion",
          lambda: (continuous_fusion_forward(img, cloud, cam, grid, fcfg, mlp) ** 2.0).sum(),
          fusion_params)

    # end-to-end miniature model: 8x8 BEV raster, 2-group streams, 4-point cloud
    results.append(_miniature_model_check(rtol))
    return results


def miniature_config() -> ExperimentConfig:
    from .backbone import BackboneConfig, GroupSpec
    from .config import ExperimentConfig
    from .data import SceneGenConfig
    cfg = ExperimentConfig(
        grid=BevGrid((0.0, 16.0), (-8.0, 8.0), (0.0, 2.0), 8, 8, 2),
        backbone=BackboneConfig(
            bev_groups=[GroupSpec(2, 4, 1), GroupSpec(2, 6, 2)],
            image_groups=[GroupSpec(2, 4, 1), GroupSpec(2, 6, 2)],
            fusion_points=(0, 1)),
        fusion=FusionConfig(k=1, max_dist=10.0, input_dim=7, output_dim=4),
        image_feat_channels=4, bev_fpn_channels=6)
    cfg.data.synthetic = SceneGenConfig(
        x_range=(2.0, 14.0), y_range=(-6.0, 6.0), object_count=(1, 1),
        ground_points=0, surface_points_ref=4, image_shape=(2, 8, 8),
        focal=(3.0, 3.0), seed=3)
    cfg.data.n_scenes = 1
    return cfg


def _miniature_model_check(rtol: float) -> tuple[str, float, bool]:
    from .gradcheck import max_rel_error, numeric_grad
    cfg = miniature_config()
    rng = np.random.default_rng(5)
    model = build_model(cfg, rng)
    sample = build_scenes(cfg)[0]
    sample.cloud = PointCloud(sample.cloud.points[:4])     # 4-point cloud
    anchors = make_anchors(model.output_grid, cfg.anchor.size, cfg.anchor.z)
    prep = prepare_scene(model, cfg, anchors, sample)
    params = model.parameters()
    _jitter_biases(params, rng)

    # freeze the mined negative set: mining ranks by live scores, which makes
    # the loss piecewise in the parameters and invalidates finite differences
    header = model.forward(prep.bev_input, prep.sample.image_feature_input,
                           prep.plans)
    scores = 1.0 / (1.0 + np.exp(-np.clip(header.flat().data[:, 0], -500, 500)))
    mined = hard_negative_mining(prep.neg_idx, scores,
                                 cfg.assignment().topk(prep.pos_idx.size),
                                 cfg.assignment().neg_sample_fraction,
                                 np.random.default_rng(1))

    def loss():
        return scene_loss(model, cfg, prep, np.random.default_rng(1),
                          mined_override=mined).total
    for p in params.values():
        p.grad = None
    loss().backward()
    worst = 0.0
    # check a representative parameter subset (full sweep is minutes-slow)
    for name in sorted(params):
        p = params[name]
        if p.size > 80:
            continue
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        worst = max(worst, max_rel_error(analytic, numeric_grad(loss, p)))
    return ("miniature_end_to_end", worst, worst < rtol)


# -- benchmark -----------------------------------------------------------------

def run_bench(repeats: int = 5, seed: int = 0) -> list[dict]:
    """Median wall times for the hot paths across input sizes."""
    rng = np.random.default_rng(seed)
    rows = []

    def timeit(fn):
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            fn()
            times.append(time.perf_counter() - t0)
        return float(np.median(times))

    for n in (1000, 10000, 30000):
        cloud = PointCloud(rng.uniform([0, -40, -2], [70, 40, 2], (n, 3)))
        queries = rng.uniform([0, -40], [70, 40], (50, 2))
        index = build_bev_index(cloud)
        rows.append({"op": "knn_brute", "size": n,
                     "seconds": timeit(lambda: [knn_bev(q, cloud, 5) for q in queries])})
        rows.append({"op": "knn_index", "size": n,
                     "seconds": timeit(lambda: index.query_batch(queries, 5))})
        grid = BevGrid((0, 70), (-40, 40), (-2, 2), 64, 64, 8)
        rows.append({"op": "voxelize", "size": n,
                     "seconds": timeit(lambda: voxelize(cloud, grid))})

    from .data import make_forward_camera
    cam = make_forward_camera((32, 64), (12.0, 12.0))
    mlp = FusionMlp(7, 8, rng)
    img = Tensor(rng.standard_normal((4, 32, 64)))
    for npix in (16, 32):
        grid = BevGrid((0, 32), (-16, 16), (0, 3), npix, npix, 1)
        cloud = PointCloud(rng.uniform([1, -15, 0], [31, 15, 2], (2000, 3)))
        fcfg = FusionConfig(k=1, max_dist=10.0, input_dim=7, output_dim=8)
        rows.append({"op": "fusion_forward", "size": npix * npix,
                     "seconds": timeit(
                         lambda: continuous_fusion_forward(img, cloud, cam, grid, fcfg, mlp))})

    for nbox in (50, 200, 800):
        boxes = [DetectionBox(float(x), float(y), 1.0, 4.0, 2.0, 1.5, float(t),
                              score=float(s))
                 for x, y, t, s in zip(rng.uniform(0, 60, nbox),
                                       rng.uniform(-30, 30, nbox),
                                       rng.uniform(-1.5, 1.5, nbox),
                                       rng.uniform(0, 1, nbox))]
        rows.append({"op": "nms", "size": nbox,
                     "seconds": timeit(lambda: nms(boxes, 0.3, 0.05))})
    return rows
