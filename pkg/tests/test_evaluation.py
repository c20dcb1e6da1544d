"""Evaluator tests: matching rules, AP fixtures with closed-form values, and
a 3-scene fixture checked against an independent loop-based reference."""

from __future__ import annotations

import numpy as np
import pytest

from vlodtta.data import GroundTruth
from vlodtta.evaluation import (
    IOU_THRESHOLDS,
    RECALL_GRID,
    average_precision,
    evaluate,
    match_detections,
)
from vlodtta.geometry import Box, Detection

# frozen from the reference implementation below (agreement was ~4e-16)
FIXTURE_MEAN_AP = 0.5481848184818481
FIXTURE_AP50 = 0.7095709570957096
FIXTURE_AP75 = 0.585808580858086


def test_grids():
    assert IOU_THRESHOLDS.shape == (10,)
    assert IOU_THRESHOLDS[0] == 0.5 and IOU_THRESHOLDS[-1] == pytest.approx(0.95)
    assert RECALL_GRID.shape == (101,)


# -- matching ----------------------------------------------------------------- #

def test_match_perfect_detection():
    gts = [GroundTruth(Box(0, 0, 10, 10), 0)]
    dets = [Detection(Box(0, 0, 10, 10), 0, 0.9)]
    flags, n_gt = match_detections(dets, gts, 0.5)
    assert n_gt == 1
    np.testing.assert_array_equal(flags, [True])


def test_match_duplicate_is_fp():
    gts = [GroundTruth(Box(0, 0, 10, 10), 0)]
    dets = [
        Detection(Box(0, 0, 10, 10), 0, 0.9),
        Detection(Box(0, 0, 10, 10), 0, 0.8),
    ]
    flags, _ = match_detections(dets, gts, 0.5)
    np.testing.assert_array_equal(flags, [True, False])


def test_match_visits_by_score_not_input_order():
    gts = [GroundTruth(Box(0, 0, 10, 10), 0)]
    dets = [
        Detection(Box(0, 0, 10, 10), 0, 0.2),  # low score, listed first
        Detection(Box(0, 0, 10, 10), 0, 0.9),
    ]
    flags, _ = match_detections(dets, gts, 0.5)
    # visiting order is descending score: the 0.9 one wins the ground truth
    np.testing.assert_array_equal(flags, [True, False])


def test_match_prefers_highest_iou_gt():
    gts = [
        GroundTruth(Box(0, 0, 10, 10), 0),
        GroundTruth(Box(2, 2, 12, 12), 0),
    ]
    det = Detection(Box(2, 2, 12, 12), 0, 0.9)
    flags, _ = match_detections([det, Detection(Box(0, 0, 10, 10), 0, 0.8)], gts, 0.5)
    np.testing.assert_array_equal(flags, [True, True])  # each takes its own gt


def test_match_respects_class():
    gts = [GroundTruth(Box(0, 0, 10, 10), 1)]
    dets = [Detection(Box(0, 0, 10, 10), 0, 0.9)]
    flags, _ = match_detections(dets, gts, 0.5)
    np.testing.assert_array_equal(flags, [False])


def test_match_threshold_boundary_inclusive():
    # IoU exactly at the threshold must count as a match
    gts = [GroundTruth(Box(0, 0, 10, 10), 0)]
    det = Detection(Box(0, 5, 10, 15), 0, 0.9)  # IoU = 50 / 150 = 1/3
    flags_hit, _ = match_detections([det], gts, 1.0 / 3.0)
    flags_miss, _ = match_detections([det], gts, 1.0 / 3.0 + 1e-9)
    np.testing.assert_array_equal(flags_hit, [True])
    np.testing.assert_array_equal(flags_miss, [False])


# -- average precision --------------------------------------------------------- #

def test_ap_single_tp_is_one():
    assert average_precision(np.array([True]), 1) == pytest.approx(1.0, abs=1e-9)


def test_ap_fp_then_tp_closed_form():
    # one FP above one TP with two ground truths: precision 0.5 out to
    # recall 0.5, giving (51 / 101) * 0.5 on the 101-point grid
    ap = average_precision(np.array([False, True]), 2)
    assert ap == pytest.approx((51.0 / 101.0) * 0.5, abs=1e-9)


def test_ap_all_tps_is_one():
    assert average_precision(np.array([True] * 5), 5) == pytest.approx(1.0, abs=1e-12)


def test_ap_empty_cases():
    assert average_precision(np.zeros(0, dtype=bool), 3) == 0.0
    assert average_precision(np.array([True]), 0) == 0.0
    assert average_precision(np.array([False, False]), 2) == 0.0


def test_ap_monotone_in_prefix_tps():
    # turning the first flag from FP to TP can only raise AP
    flags = np.array([False, True, False, True])
    better = flags.copy()
    better[0] = True
    assert average_precision(better, 4) > average_precision(flags, 4)


# -- the 3-scene fixture --------------------------------------------------------- #

def _fixture():
    scenes_gt = [
        [GroundTruth(Box(0, 0, 10, 10), 0), GroundTruth(Box(20, 20, 40, 40), 1)],
        [GroundTruth(Box(5, 5, 15, 15), 0)],
        [GroundTruth(Box(0, 0, 30, 30), 1)],
    ]
    scenes_det = [
        [
            Detection(Box(0, 0, 10, 10), 0, 0.95),    # perfect TP
            Detection(Box(1, 1, 11, 11), 0, 0.90),    # duplicate -> FP
            Detection(Box(21, 21, 39, 39), 1, 0.70),  # IoU 0.81 TP
        ],
        [
            Detection(Box(6, 6, 14, 14), 0, 0.50),    # IoU 0.64: TP at low thresholds
            Detection(Box(5, 5, 15, 15), 1, 0.80),    # class with no gt here -> FP
        ],
        [
            Detection(Box(0, 0, 30, 30), 1, 0.30),    # perfect TP, lowest score
            Detection(Box(50, 50, 60, 60), 0, 0.85),  # background FP
        ],
    ]
    return scenes_det, scenes_gt


def _ref_iou(a, b):
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter
    return inter / union


def _reference_eval(scenes_det, scenes_gt):
    """Pooled evaluation in plain dict-and-loop form, shared code avoided."""
    classes = sorted({g.class_id for scene in scenes_gt for g in scene})
    thresholds = [0.5 + 0.05 * i for i in range(10)]
    grid = [i / 100.0 for i in range(101)]
    per_class_curve = {}
    for cls in classes:
        aps = []
        for thr in thresholds:
            rows = []
            for img, (dets, gts) in enumerate(zip(scenes_det, scenes_gt)):
                cls_dets = sorted(
                    ((i, d) for i, d in enumerate(dets) if d.class_id == cls),
                    key=lambda p: (-p[1].score, p[0]),
                )
                cls_gts = [g for g in gts if g.class_id == cls]
                used = [False] * len(cls_gts)
                for i, d in cls_dets:
                    best, best_iou = -1, -1.0
                    for j, g in enumerate(cls_gts):
                        if not used[j]:
                            ov = _ref_iou(d.box, g.box)
                            if ov >= thr and ov > best_iou:
                                best, best_iou = j, ov
                    if best >= 0:
                        used[best] = True
                    rows.append((-d.score, img, i, best >= 0))
            rows.sort()
            n_gt = sum(1 for scene in scenes_gt for g in scene if g.class_id == cls)
            tp = fp = 0
            points = []
            for _, _, _, flag in rows:
                tp, fp = tp + flag, fp + (not flag)
                points.append((tp / n_gt, tp / (tp + fp)))
            total = 0.0
            for r in grid:
                total += max((p for rec, p in points if rec >= r), default=0.0)
            aps.append(total / 101.0)
        per_class_curve[cls] = aps
    mean_ap = float(np.mean([np.mean(per_class_curve[c]) for c in classes]))
    ap50 = float(np.mean([per_class_curve[c][0] for c in classes]))
    ap75 = float(np.mean([per_class_curve[c][5] for c in classes]))
    return mean_ap, ap50, ap75


def test_three_scene_fixture_matches_reference():
    scenes_det, scenes_gt = _fixture()
    report = evaluate(scenes_det, scenes_gt)
    ref_mean, ref_50, ref_75 = _reference_eval(scenes_det, scenes_gt)
    assert report.mean_ap == pytest.approx(ref_mean, abs=1e-6)
    assert report.ap50 == pytest.approx(ref_50, abs=1e-6)
    assert report.ap75 == pytest.approx(ref_75, abs=1e-6)
    assert report.mean_ap == pytest.approx(FIXTURE_MEAN_AP, abs=1e-9)
    assert report.ap50 == pytest.approx(FIXTURE_AP50, abs=1e-9)
    assert report.ap75 == pytest.approx(FIXTURE_AP75, abs=1e-9)


def test_fixture_per_class_keys():
    scenes_det, scenes_gt = _fixture()
    report = evaluate(scenes_det, scenes_gt)
    assert set(report.per_class) == {0, 1}
    assert report.mean_ap == pytest.approx(
        (report.per_class[0] + report.per_class[1]) / 2.0, abs=1e-12
    )


# -- dataset-level properties ----------------------------------------------------- #

def test_monotone_score_transform_preserves_ap():
    scenes_det, scenes_gt = _fixture()
    transformed = [
        [Detection(d.box, d.class_id, 0.1 + 0.5 * d.score) for d in dets]
        for dets in scenes_det
    ]
    a = evaluate(scenes_det, scenes_gt)
    b = evaluate(transformed, scenes_gt)
    assert a.mean_ap == pytest.approx(b.mean_ap, abs=1e-12)
    assert a.ap50 == pytest.approx(b.ap50, abs=1e-12)


def test_duplicating_detections_cannot_help():
    scenes_det, scenes_gt = _fixture()
    doubled = [list(dets) + list(dets) for dets in scenes_det]
    assert evaluate(doubled, scenes_gt).mean_ap <= evaluate(scenes_det, scenes_gt).mean_ap


def test_detections_of_classes_without_gt_are_ignored():
    scenes_det, scenes_gt = _fixture()
    noisy = [list(dets) for dets in scenes_det]
    noisy[0].append(Detection(Box(0, 0, 5, 5), 7, 0.99))
    a = evaluate(scenes_det, scenes_gt)
    b = evaluate(noisy, scenes_gt)
    assert a.mean_ap == b.mean_ap
    assert 7 not in b.per_class


def test_evaluate_validates_input():
    with pytest.raises(ValueError):
        evaluate([[]], [[]])  # no ground truth anywhere
    with pytest.raises(ValueError):
        evaluate([[], []], [[GroundTruth(Box(0, 0, 1, 1), 0)]])  # length mismatch


def test_perfect_detector_scores_one():
    scenes_gt = [
        [GroundTruth(Box(0, 0, 10, 10), 0), GroundTruth(Box(30, 30, 50, 50), 1)],
        [GroundTruth(Box(5, 5, 25, 25), 1)],
    ]
    scenes_det = [
        [Detection(g.box, g.class_id, 0.9) for g in scene] for scene in scenes_gt
    ]
    report = evaluate(scenes_det, scenes_gt)
    assert report.mean_ap == pytest.approx(1.0, abs=1e-12)
    assert report.ap50 == pytest.approx(1.0, abs=1e-12)
    assert report.ap75 == pytest.approx(1.0, abs=1e-12)
