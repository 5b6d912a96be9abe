"""Acceptance suite: one test per criterion, each ending in a PASS line with
the measured quantity and its tolerance."""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from bevfuse.config import ExperimentConfig, load_config
from bevfuse.detect import (Anchor, DetectionBox, decode_targets,
                            encode_targets, nms, rotated_iou_bev)
from bevfuse.evaluation import FP, TP, average_precision
from bevfuse.fusion import FusionConfig, FusionMlp, continuous_fusion_forward
from bevfuse.geometry import (BevGrid, PointCloud, bilinear_sample,
                              build_bev_index, knn_bev, project_points,
                              voxelize)
from bevfuse.pipeline import (build_model, build_scenes, miniature_config,
                              run_gradcheck, train_run)
from bevfuse.tensor import Tensor

CONFIG_DIR = __file__.rsplit("/", 2)[0] + "/configs"


def _overfit_config() -> ExperimentConfig:
    return load_config(f"{CONFIG_DIR}/overfit.yaml")


def _ablation_config() -> ExperimentConfig:
    return load_config(f"{CONFIG_DIR}/ablation.yaml")


# 1 ---------------------------------------------------------------------------

def test_criterion_1_gradient_suite():
    t0 = time.time()
    rows = run_gradcheck(rtol=1e-4)
    elapsed = time.time() - t0
    worst = max(err for _, err, _ in rows)
    for name, err, ok in rows:
        assert ok, f"{name}: max relative error {err:.3e} >= 1e-4"
    assert elapsed < 60.0, f"gradient suite took {elapsed:.1f} s >= 60 s"
    print(f"\nPASS criterion 1: {len(rows)} checks, worst rel err "
          f"{worst:.2e} < 1e-4, {elapsed:.1f} s < 60 s")


# 2 ---------------------------------------------------------------------------

def test_criterion_2_oracle_equivalence():
    rng = np.random.default_rng(0)

    # knn (kd-tree and knn_bev) vs an independent linear scan:
    # 100 queries x 500 points, exact
    cloud = PointCloud(rng.uniform([0, -10, -1], [30, 10, 2], (500, 3)))
    index = build_bev_index(cloud)
    for q in rng.uniform([0, -10], [30, 10], (100, 2)):
        d = np.hypot(cloud.points[:, 0] - q[0], cloud.points[:, 1] - q[1])
        order = sorted(range(500), key=lambda i: (d[i], i))
        ref = [i for i in order[:5] if d[i] <= 8.0]
        assert knn_bev(q, cloud, 5, 8.0) == ref
        assert index.query(q, 5, 8.0) == ref

    # fusion forward vs loop nest, 1e-10
    from bevfuse.data import make_forward_camera
    cam = make_forward_camera((12, 16), (4.0, 4.0))
    small = PointCloud(rng.uniform([1, -4, 0], [9, 4, 2], (40, 3)))
    grid = BevGrid((0.0, 10.0), (-5.0, 5.0), (0.0, 2.0), 8, 8, 1)
    fcfg = FusionConfig(k=3, max_dist=4.0, input_dim=7, output_dim=5)
    img = Tensor(rng.standard_normal((4, 12, 16)))
    mlp = FusionMlp(7, 5, rng)
    fused = continuous_fusion_forward(img, small, cam, grid, fcfg, mlp).data
    uv, valid = project_points(small, cam)
    centers = grid.pixel_centers()
    ref = np.zeros_like(fused)
    for iy in range(8):
        for ix in range(8):
            cx, cy = centers[iy, ix]
            for j in knn_bev((cx, cy), small, 3, 4.0):
                f = bilinear_sample(img, uv[j, 0], uv[j, 1]).data if valid[j] \
                    else np.zeros(4)
                x = np.concatenate([f, small.points[j] - [cx, cy, 0.0]])
                h1 = np.maximum(x @ mlp.w1.data + mlp.b1.data[0], 0.0)
                h2 = np.maximum(h1 @ mlp.w2.data + mlp.b2.data[0], 0.0)
                ref[:, iy, ix] += h2 @ mlp.w3.data + mlp.b3.data[0]
    fusion_err = float(np.abs(fused - ref).max())
    assert fusion_err < 1e-10

    # NMS vs quadratic reference, exact
    boxes = [DetectionBox(float(x), float(y), 0.5, 3.5, 1.8, 1.2, float(t),
                          score=float(s))
             for x, y, t, s in zip(rng.uniform(0, 25, 80),
                                   rng.uniform(-12, 12, 80),
                                   rng.uniform(-1.5, 1.5, 80),
                                   rng.uniform(0, 1, 80))]
    order = sorted(range(80), key=lambda i: (-boxes[i].score, i))
    keep = []
    for i in order:
        if boxes[i].score < 0.1:
            continue
        if any(rotated_iou_bev(boxes[i], boxes[j]) >= 0.1 for j in keep):
            continue
        keep.append(i)
        if len(keep) >= 50:
            break
    assert nms(boxes, 0.1, 0.1, 50) == [boxes[i] for i in keep]

    # rotated IoU vs 1e6-sample Monte Carlo, +-1e-3
    a = DetectionBox(0, 0, 0, 4.0, 2.0, 1.0, 0.4)
    b = DetectionBox(1.0, 0.5, 0, 3.0, 2.5, 1.0, -0.8)
    from bevfuse.detect import box_corners_bev
    ca, cb = box_corners_bev(a), box_corners_bev(b)
    lo = np.minimum(ca.min(0), cb.min(0))
    hi = np.maximum(ca.max(0), cb.max(0))
    pts = np.random.default_rng(0).uniform(lo, hi, (10 ** 6, 2))

    def inside(box, p):
        c, s = math.cos(box.t), math.sin(box.t)
        dx, dy = p[:, 0] - box.x, p[:, 1] - box.y
        u, v = dx * c + dy * s, -dx * s + dy * c
        return (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)

    ia, ib = inside(a, pts), inside(b, pts)
    mc = float((ia & ib).mean() / (ia | ib).mean())
    iou_err = abs(rotated_iou_bev(a, b) - mc)
    assert iou_err < 1e-3

    # AP vs hand-computed staircase (5 detections, 3 gts), exact:
    # interpolated precision is 1 on recall levels {0,.1,.2,.3}, 2/3 on
    # {.4,.5,.6} and 3/5 on {.7,.8,.9,1}
    flags = np.array([TP, FP, TP, FP, TP])
    expected = float(np.mean(np.array([1.0] * 4 + [2 / 3] * 3 + [3 / 5] * 4)))
    assert average_precision(flags, 3, 11) == expected

    print(f"\nPASS criterion 2: knn exact, fusion loop-nest err "
          f"{fusion_err:.1e} < 1e-10, NMS exact, IoU vs MC err "
          f"{iou_err:.1e} < 1e-3, AP staircase exact")


# 3 ---------------------------------------------------------------------------

def test_criterion_3_encode_decode_round_trip():
    rng = np.random.default_rng(1)
    worst = 0.0
    for i in range(10 ** 4):
        anchor = Anchor(*rng.uniform([1, -20, 0.2], [40, 20, 2], 3),
                        *rng.uniform(0.5, 6.0, 3),
                        rng.uniform(-math.pi, math.pi))
        if i == 0:      # zero-offset case
            gt = DetectionBox(anchor.x, anchor.y, anchor.z, anchor.w, anchor.h,
                              anchor.d, anchor.t)
        elif i == 1:    # log-2 size case
            gt = DetectionBox(anchor.x, anchor.y, anchor.z, 2 * anchor.w,
                              2 * anchor.h, 2 * anchor.d, anchor.t)
        else:
            gt = DetectionBox(*rng.uniform([1, -20, 0.2], [40, 20, 2], 3),
                              *rng.uniform(0.5, 6.0, 3),
                              rng.uniform(-math.pi, math.pi))
        for norm in ("anchor_coord", "diagonal"):
            enc = encode_targets(gt, anchor, center_norm=norm)
            if i == 0:
                assert np.abs(enc).max() < 1e-12
            if i == 1:
                np.testing.assert_allclose(enc[3:6], math.log(2.0), atol=1e-12)
            dec = decode_targets(enc, anchor, center_norm=norm)
            for attr in ("x", "y", "z", "w", "h", "d", "t"):
                worst = max(worst, abs(getattr(dec, attr) - getattr(gt, attr)))
    assert worst < 1e-10
    print(f"\nPASS criterion 3: 1e4 round trips, worst err {worst:.1e} < 1e-10")


# 4 ---------------------------------------------------------------------------

def test_criterion_4_overfit(tmp_path):
    cfg = _overfit_config()
    assert cfg.optimizer.steps == 300 and cfg.optimizer.lr == 0.001
    assert cfg.data.n_scenes == 4
    t0 = time.time()
    report = train_run(cfg, tmp_path / "overfit")
    elapsed = time.time() - t0
    ratio = report["final_loss"] / report["initial_loss"]
    assert ratio <= 0.05, f"loss ratio {ratio:.4f} > 0.05"
    assert report["ap"] >= 0.95, f"training AP {report['ap']:.3f} < 0.95"
    assert elapsed < 300.0, f"training took {elapsed:.0f} s >= 300 s"
    print(f"\nPASS criterion 4: loss ratio {ratio:.4f} <= 0.05, "
          f"AP {report['ap']:.3f} >= 0.95, {elapsed:.0f} s < 300 s")


# 5 ---------------------------------------------------------------------------

def test_criterion_5_additive_fusion_identity():
    cfg = miniature_config()
    fused_model = build_model(cfg, np.random.default_rng(7))
    bev_model = build_model(replace(cfg, mode="bev_only"),
                            np.random.default_rng(7))
    # share the BEV-stream weights, zero the fusion MLP output layers
    bev_params = {k: v.data for k, v in fused_model.parameters().items()
                  if not k.startswith(("image", "fusion"))}
    bev_model.load_parameters(bev_params)
    for mlp in fused_model.fusion_mlps.values():
        mlp.zero_output_layer()
    scene = build_scenes(cfg)[0]
    bev_in = voxelize(scene.cloud, cfg.grid)
    plans = fused_model.make_plans(scene.cloud, scene.cam)
    out_fused = fused_model.forward(bev_in, scene.image_feature_input, plans)
    out_bev = bev_model.forward(bev_in, None, None)
    assert np.array_equal(out_fused.raw.data, out_bev.raw.data), \
        "fused output with zeroed MLPs differs from the BEV-only output"
    print("\nPASS criterion 5: zeroed fusion output layers give bit-identical "
          "header outputs")


# 6 ---------------------------------------------------------------------------

def test_criterion_6_ablation_direction(tmp_path):
    base = _ablation_config()
    aps = {"continuous": [], "bev_only": []}
    for seed in (0, 1, 2):
        for mode in aps:
            cfg = replace(base, seed=seed, mode=mode)
            report = train_run(cfg, tmp_path / f"{mode}_{seed}")
            aps[mode].append(report["ap"])
    mean_cont = float(np.mean(aps["continuous"]))
    mean_bev = float(np.mean(aps["bev_only"]))
    wins = sum(c > b for c, b in zip(aps["continuous"], aps["bev_only"]))
    assert mean_cont > mean_bev, \
        f"mean continuous AP {mean_cont:.3f} <= mean BEV-only {mean_bev:.3f}"
    assert wins >= 2, f"continuous won only {wins}/3 seeds"
    print(f"\nPASS criterion 6: continuous AP {mean_cont:.3f} > BEV-only "
          f"{mean_bev:.3f} (mean of 3 seeds, {wins}/3 seed-wise wins)")


# 7 ---------------------------------------------------------------------------

def test_criterion_7_metric_consistency():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(50):
        # dense set: many ranked detections whose recall sweeps all of [0, 1]
        n = int(rng.integers(200, 600))
        flags = (rng.random(n) < rng.uniform(0.3, 0.9)).astype(np.int64)
        num_gt = int(flags.sum())
        if num_gt == 0:
            continue
        a11 = average_precision(flags, num_gt, 11)
        a100 = average_precision(flags, num_gt, 100)
        worst = max(worst, abs(a11 - a100))
    assert worst < 0.05
    print(f"\nPASS criterion 7: max |AP11 - AP100| = {worst:.4f} < 0.05 "
          f"over 50 dense random detection sets")


# 8 ---------------------------------------------------------------------------

def test_criterion_8_determinism(tmp_path):
    cfg = miniature_config()
    cfg.optimizer.steps = 8
    cfg.optimizer.checkpoint_every = 4
    train_run(cfg, tmp_path / "a")
    train_run(cfg, tmp_path / "b")
    files = ["config.yaml", "train_log.jsonl", "ckpt_000004.bin",
             "ckpt_final.bin", "final_metrics.json"]
    for name in files:
        ba = (tmp_path / "a" / name).read_bytes()
        bb = (tmp_path / "b" / name).read_bytes()
        assert ba == bb, f"{name} differs between identical runs"
    print(f"\nPASS criterion 8: {len(files)} artifacts bit-identical across "
          f"two identical runs")


# 9 ---------------------------------------------------------------------------

CALIB_TEXT = """P2: 700.0 0.0 600.0 40.0 0.0 700.0 180.0 2.0 0.0 0.0 1.0 0.01
R0_rect: 1 0 0 0 1 0 0 0 1
Tr_velo_to_cam: 0 -1 0 0 0 0 -1 0 1 0 0 0
"""

LABEL_TEXT = (
    "Car 0.00 0 -1.58 100.0 150.0 300.0 250.0 1.50 1.80 4.20 2.0 1.7 15.0 -1.58\n"
    "DontCare -1 -1 -10 500.0 160.0 560.0 200.0 -1 -1 -1 -1000 -1000 -1000 -10\n"
)


def test_criterion_9_kitti_fidelity(tmp_path):
    from bevfuse.data import (_kitti_chain, load_kitti_calib,
                              load_kitti_labels, load_kitti_velodyne,
                              write_kitti_labels)
    velo = np.array([[10.0, 1.0, -0.5, 0.3], [20.0, -2.0, 0.0, 0.9]],
                    dtype=np.float32)
    (tmp_path / "f.bin").write_bytes(velo.tobytes())
    (tmp_path / "calib.txt").write_text(CALIB_TEXT)
    (tmp_path / "label.txt").write_text(LABEL_TEXT)

    cloud = load_kitti_velodyne(tmp_path / "f.bin")
    np.testing.assert_array_equal(cloud.points,
                                  velo[:, :3].astype(np.float64))
    np.testing.assert_array_equal(cloud.intensity,
                                  velo[:, 3].astype(np.float64))

    cam = load_kitti_calib(tmp_path / "calib.txt")
    uv, valid = project_points(PointCloud(np.array([[15.0, 0.0, 0.0]])), cam)
    assert valid[0]
    np.testing.assert_allclose(uv[0], [(600.0 * 15 + 40.0) / 15.01,
                                       (180.0 * 15 + 2.0) / 15.01], atol=1e-12)

    r0_4, tr_4 = _kitti_chain(tmp_path / "calib.txt")
    velo_to_rect = r0_4 @ tr_4
    boxes = load_kitti_labels(tmp_path / "label.txt",
                              np.linalg.inv(velo_to_rect))
    car = boxes[0]
    np.testing.assert_allclose([car.x, car.y, car.z],
                               [15.0, -2.0, -1.7 + 0.75], atol=1e-12)
    np.testing.assert_allclose([car.w, car.h, car.d], [4.20, 1.80, 1.50])
    np.testing.assert_allclose(car.t, 1.58 - math.pi / 2, atol=1e-12)
    np.testing.assert_allclose(car.height2d, 100.0)
    assert boxes[1].ignored

    write_kitti_labels(boxes, tmp_path / "rt.txt", velo_to_rect)
    again = load_kitti_labels(tmp_path / "rt.txt", np.linalg.inv(velo_to_rect))
    worst = 0.0
    for a, b in zip(again, boxes):
        assert a.cls == b.cls and a.ignored == b.ignored
        for attr in ("x", "y", "z", "w", "h", "d", "t"):
            worst = max(worst, abs(getattr(a, attr) - getattr(b, attr)))
    assert worst <= 5.1e-3, f"round-trip error {worst:.2e} beyond 1e-2 format precision"
    print(f"\nPASS criterion 9: fixtures load exactly; label round trip worst "
          f"err {worst:.1e} within the 2-decimal format precision")
