import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bevfuse.detect import (ANCHOR_ORIENTATIONS, NUM_REG, Anchor, DetectionBox,
                            DetectionHeader, HeaderOutput, box_corners_bev,
                            decode_detections, decode_targets, encode_targets,
                            iou_3d, make_anchors, nms, polygon_intersection_area,
                            rotated_iou_bev)
from bevfuse.geometry import BevGrid
from bevfuse.tensor import Tensor


def test_anchor_rejects_nonpositive_size():
    with pytest.raises(ValueError):
        Anchor(0, 0, 0, -1.0, 2.0, 1.0, 0.0)


def test_make_anchors_layout():
    grid = BevGrid((0.0, 4.0), (-2.0, 2.0), (0.0, 1.0), 2, 2, 1)
    anchors = make_anchors(grid, (4.0, 2.0, 1.6), z=0.8)
    assert len(anchors) == 2 * 2 * 2
    # row-major (iy, ix, orientation)
    assert (anchors[0].x, anchors[0].y, anchors[0].t) == (1.0, -1.0, 0.0)
    assert anchors[1].t == math.pi / 2
    assert (anchors[2].x, anchors[2].y) == (3.0, -1.0)
    assert (anchors[4].x, anchors[4].y) == (1.0, 1.0)
    assert all(a.z == 0.8 for a in anchors)


def test_encode_known_values():
    anchor = Anchor(10.0, 5.0, 1.0, 4.0, 2.0, 1.6, 0.0)
    gt = DetectionBox(12.0, 5.0, 1.0, 8.0, 2.0, 1.6, 0.3)
    enc = encode_targets(gt, anchor)
    np.testing.assert_allclose(enc[0], 2.0 / 10.0)     # (x - a_x) / a_x
    np.testing.assert_allclose(enc[1], 0.0)
    np.testing.assert_allclose(enc[3], math.log(2.0))  # log-2 size case
    np.testing.assert_allclose(enc[4], 0.0)
    np.testing.assert_allclose(enc[6], 0.3)            # raw orientation offset


def test_encode_zero_offset_is_zero_vector():
    anchor = Anchor(8.0, -3.0, 1.0, 4.0, 2.0, 1.6, math.pi / 2)
    gt = DetectionBox(8.0, -3.0, 1.0, 4.0, 2.0, 1.6, math.pi / 2)
    np.testing.assert_allclose(encode_targets(gt, anchor), np.zeros(7), atol=1e-15)


def test_encode_diagonal_normalizer():
    anchor = Anchor(10.0, 0.0, 1.0, 4.0, 2.0, 1.6, 0.0)
    gt = DetectionBox(12.0, 1.0, 1.0, 4.0, 2.0, 1.6, 0.0)
    diag = math.sqrt(4 ** 2 + 2 ** 2 + 1.6 ** 2)
    enc = encode_targets(gt, anchor, center_norm="diagonal")
    np.testing.assert_allclose(enc[:2], [2.0 / diag, 1.0 / diag])


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.sampled_from(["anchor_coord", "diagonal"]))
def test_encode_decode_round_trip(seed, norm):
    rng = np.random.default_rng(seed)
    anchor = Anchor(*rng.uniform([1, -20, 0.2], [40, 20, 2], 3),
                    *rng.uniform(0.5, 6.0, 3), rng.uniform(-math.pi, math.pi))
    gt = DetectionBox(*rng.uniform([1, -20, 0.2], [40, 20, 2], 3),
                      *rng.uniform(0.5, 6.0, 3), rng.uniform(-math.pi, math.pi))
    enc = encode_targets(gt, anchor, center_norm=norm)
    dec = decode_targets(enc, anchor, center_norm=norm)
    for attr in ("x", "y", "z", "w", "h", "d", "t"):
        assert abs(getattr(dec, attr) - getattr(gt, attr)) < 1e-10


def test_box_corners_axis_aligned():
    box = DetectionBox(0.0, 0.0, 0.0, 4.0, 2.0, 1.0, 0.0)
    corners = box_corners_bev(box)
    assert sorted(map(tuple, corners.round(9))) == [(-2.0, -1.0), (-2.0, 1.0),
                                                    (2.0, -1.0), (2.0, 1.0)]


def test_rotated_iou_identical_boxes():
    box = DetectionBox(3.0, -1.0, 0.0, 4.0, 2.0, 1.5, 0.7)
    assert rotated_iou_bev(box, box) == pytest.approx(1.0, abs=1e-12)


def test_rotated_iou_disjoint_is_zero():
    a = DetectionBox(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.3)
    b = DetectionBox(10.0, 0.0, 0.0, 2.0, 2.0, 1.0, 1.2)
    assert rotated_iou_bev(a, b) == 0.0


def test_rotated_iou_axis_aligned_oracle():
    a = DetectionBox(0.0, 0.0, 0.0, 4.0, 2.0, 1.0, 0.0)
    b = DetectionBox(2.0, 1.0, 0.0, 4.0, 2.0, 1.0, 0.0)
    # overlap 2x1 = 2; union 8 + 8 - 2 = 14
    assert rotated_iou_bev(a, b) == pytest.approx(2.0 / 14.0, abs=1e-12)


def test_rotated_iou_45_degrees_analytic():
    # unit squares, one rotated 45 degrees about the shared center:
    # intersection is a regular octagon of area 2*(sqrt(2)-1) ~ 0.8284
    a = DetectionBox(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0)
    b = DetectionBox(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, math.pi / 4)
    inter = 2 * (math.sqrt(2) - 1)
    expected = inter / (2 - inter)
    assert rotated_iou_bev(a, b) == pytest.approx(expected, abs=1e-12)


def _mc_iou(a, b, n, rng):
    ca, cb = box_corners_bev(a), box_corners_bev(b)
    lo = np.minimum(ca.min(0), cb.min(0))
    hi = np.maximum(ca.max(0), cb.max(0))
    pts = rng.uniform(lo, hi, (n, 2))

    def inside(box, p):
        c, s = math.cos(box.t), math.sin(box.t)
        dx, dy = p[:, 0] - box.x, p[:, 1] - box.y
        u = dx * c + dy * s
        v = -dx * s + dy * c
        return (np.abs(u) <= box.w / 2) & (np.abs(v) <= box.h / 2)

    ia, ib = inside(a, pts), inside(b, pts)
    inter = (ia & ib).mean()
    union = (ia | ib).mean()
    return float(inter / union)


def test_rotated_iou_monte_carlo():
    rng = np.random.default_rng(0)
    cases = [
        (DetectionBox(0, 0, 0, 4.0, 2.0, 1.0, 0.4),
         DetectionBox(1.0, 0.5, 0, 3.0, 2.5, 1.0, -0.8)),
        (DetectionBox(0, 0, 0, 2.0, 2.0, 1.0, 0.1),
         DetectionBox(0.5, -0.3, 0, 2.0, 1.0, 1.0, 1.2)),
    ]
    for a, b in cases:
        assert rotated_iou_bev(a, b) == pytest.approx(_mc_iou(a, b, 10 ** 6, rng),
                                                      abs=1e-3)


def test_iou_3d_vertical_overlap():
    a = DetectionBox(0, 0, 0.0, 2.0, 2.0, 2.0, 0.0)
    b = DetectionBox(0, 0, 1.0, 2.0, 2.0, 2.0, 0.0)
    # full BEV overlap, vertical overlap 1 of (2 + 2 - 1)
    assert iou_3d(a, b) == pytest.approx(4.0 / 12.0, abs=1e-12)
    c = DetectionBox(0, 0, 5.0, 2.0, 2.0, 2.0, 0.0)
    assert iou_3d(a, c) == 0.0


def test_polygon_intersection_area_squares():
    sq = np.array([[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]])
    shifted = sq + [1.0, 1.0]
    assert polygon_intersection_area(sq, shifted) == pytest.approx(1.0, abs=1e-12)


def _nms_quadratic(boxes, iou_th, score_th, max_out):
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    keep = []
    for i in order:
        if boxes[i].score < score_th:
            continue
        if any(rotated_iou_bev(boxes[i], boxes[j]) > iou_th for j in keep):
            continue
        keep.append(i)
        if len(keep) == max_out:
            break
    return [boxes[i] for i in keep]


def test_nms_matches_quadratic_reference():
    rng = np.random.default_rng(7)
    boxes = [DetectionBox(float(x), float(y), 0.5, 3.0 + float(dw), 1.5, 1.0,
                          float(t), score=float(s))
             for x, y, dw, t, s in zip(rng.uniform(0, 20, 60),
                                       rng.uniform(-10, 10, 60),
                                       rng.uniform(0, 2, 60),
                                       rng.uniform(-1.5, 1.5, 60),
                                       rng.uniform(0, 1, 60))]
    for iou_th, score_th, max_out in ((0.1, 0.1, 50), (0.3, 0.0, 10), (0.5, 0.4, 5)):
        got = nms(boxes, iou_th, score_th, max_out)
        ref = _nms_quadratic(boxes, iou_th, score_th, max_out)
        assert [(b.x, b.y, b.score) for b in got] == \
               [(b.x, b.y, b.score) for b in ref]


def test_nms_equal_score_tie_break_by_index():
    a = DetectionBox(0.0, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0, score=0.9)
    b = DetectionBox(0.1, 0.0, 0.0, 2.0, 2.0, 1.0, 0.0, score=0.9)
    kept = nms([a, b], iou_threshold=0.1, score_threshold=0.0)
    assert len(kept) == 1 and kept[0] is a


def test_header_output_layout_and_decode():
    grid = BevGrid((0.0, 4.0), (-2.0, 2.0), (0.0, 1.0), 2, 2, 1)
    anchors = make_anchors(grid, (4.0, 2.0, 1.6), z=0.8)
    raw = np.zeros((2 * 6, 2, 2))
    raw[0, 0, 0] = 5.0        # anchor 0 at pixel (0, 0): confident hit
    header = HeaderOutput(Tensor(raw), num_anchors=2, num_reg=5)
    flat = header.flat().data
    assert flat.shape == (8, 6)
    assert flat[0, 0] == 5.0
    boxes = decode_detections(header, anchors)
    assert boxes[0].score == pytest.approx(1 / (1 + math.exp(-5.0)))
    # zero offsets decode to the anchor itself
    assert (boxes[0].x, boxes[0].y, boxes[0].t) == (1.0, -1.0, 0.0)
    assert (boxes[0].w, boxes[0].h) == (4.0, 2.0)


@pytest.mark.parametrize("variant,num_reg", list(NUM_REG.items()))
def test_header_variants_channel_counts(variant, num_reg):
    header = DetectionHeader(6, variant, rng=np.random.default_rng(0))
    out = header.forward(Tensor(np.random.default_rng(1).standard_normal((6, 3, 3))))
    assert out.raw.shape == (2 * (1 + num_reg), 3, 3)
    assert out.num_reg == num_reg


def test_kitti3d_decode_carries_height2d():
    grid = BevGrid((0.0, 4.0), (-2.0, 2.0), (0.0, 1.0), 1, 1, 1)
    anchors = make_anchors(grid, (4.0, 2.0, 1.6), z=0.8)
    raw = np.zeros((2 * 9, 1, 1))
    raw[8, 0, 0] = 42.0       # height2d channel of anchor 0
    header = HeaderOutput(Tensor(raw), num_anchors=2, num_reg=8)
    boxes = decode_detections(header, anchors)
    assert boxes[0].height2d == 42.0
    assert boxes[0].is_3d
