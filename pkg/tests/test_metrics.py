"""Unit tests for the metric suite: IoU, matching, F-beta, AP, reports."""

import numpy as np
import pytest

from driftseg.metrics import (Detection, EvalError, GroundTruth, MetricBlock,
                              average_precision, box_iou_fn, dataset_iou,
                              evaluate, f_beta, iou_box, iou_mask,
                              mask_iou_fn, match_detections)


def det(box, conf, size=8, image_id=""):
    mask = np.zeros((size, size), dtype=bool)
    mask[box[1]:box[3], box[0]:box[2]] = True
    return Detection(mask=mask, box=box, confidence=conf, image_id=image_id)


def gt(box, size=8, image_id=""):
    mask = np.zeros((size, size), dtype=bool)
    mask[box[1]:box[3], box[0]:box[2]] = True
    return GroundTruth(mask=mask, box=box, image_id=image_id)


# ---------------------------------------------------------------------------
# IoU


def test_iou_box_identical():
    assert iou_box((0, 0, 4, 4), (0, 0, 4, 4)) == 1.0


def test_iou_box_disjoint():
    assert iou_box((0, 0, 2, 2), (4, 4, 6, 6)) == 0.0


def test_iou_box_one_seventh():
    assert abs(iou_box((0, 0, 2, 2), (1, 1, 3, 3)) - 1 / 7) < 1e-15


def test_iou_box_malformed():
    with pytest.raises(EvalError):
        iou_box((2, 0, 1, 4), (0, 0, 1, 1))


def test_iou_mask_matches_box_for_rectangles():
    a, b = (0, 0, 2, 2), (1, 1, 3, 3)
    assert abs(iou_mask(det(a, 1.0).mask, det(b, 1.0).mask)
               - iou_box(a, b)) < 1e-15


def test_iou_mask_both_empty_is_error():
    with pytest.raises(EvalError):
        iou_mask(np.zeros((4, 4), bool), np.zeros((4, 4), bool))


def test_iou_mask_shape_mismatch():
    with pytest.raises(EvalError):
        iou_mask(np.zeros((4, 4), bool), np.zeros((5, 5), bool))


# ---------------------------------------------------------------------------
# matching


def test_match_no_detections_all_fn():
    res = match_detections([], [gt((0, 0, 2, 2))])
    assert res.matches == [] and res.unmatched_gts == [0]


def test_match_exact_detection():
    res = match_detections([det((0, 0, 2, 2), 0.9)], [gt((0, 0, 2, 2))])
    assert len(res.matches) == 1
    assert res.unmatched_dets == [] and res.unmatched_gts == []


def test_match_higher_confidence_wins():
    dets = [det((0, 0, 4, 4), 0.9), det((0, 0, 4, 3), 0.8)]
    res = match_detections(dets, [gt((0, 0, 4, 4))])
    assert res.matches[0][0] == 0
    assert res.unmatched_dets == [1]


def test_match_iou_tie_breaks_to_lower_gt_index():
    d = det((0, 0, 2, 2), 0.9)
    gts = [gt((0, 0, 2, 2)), gt((0, 0, 2, 2))]
    res = match_detections([d], gts)
    assert res.matches[0][1] == 0


def test_match_threshold_excludes_weak_overlap():
    res = match_detections([det((0, 0, 2, 2), 0.9)], [gt((1, 1, 3, 3))],
                           threshold=0.5)
    assert res.matches == []
    assert res.unmatched_dets == [0] and res.unmatched_gts == [0]


def test_match_each_gt_claimed_once():
    dets = [det((0, 0, 2, 2), 0.9), det((0, 0, 2, 2), 0.8)]
    res = match_detections(dets, [gt((0, 0, 2, 2))])
    assert len(res.matches) == 1 and res.unmatched_dets == [1]


def test_match_confidence_tie_keeps_input_order():
    dets = [det((0, 0, 2, 2), 0.5), det((0, 0, 2, 2), 0.5)]
    res = match_detections(dets, [gt((0, 0, 2, 2))])
    assert res.matches[0][0] == 0


# ---------------------------------------------------------------------------
# f_beta / dataset_iou


def test_f_beta_cbam_row():
    assert round(f_beta(0.821, 0.721, 1.0), 2) == 0.77


def test_f_beta_equal_inputs_fixed_point():
    for beta in (0.5, 1.0, 2.0):
        assert abs(f_beta(0.4, 0.4, beta) - 0.4) < 1e-15


def test_f_beta_recall_weighted():
    assert abs(f_beta(0.5, 1.0, 2.0) - 0.8333333333333334) < 1e-12


def test_f_beta_zero_convention():
    assert f_beta(0.0, 0.0) == 0.0


def test_f_beta_rejects_nonpositive_beta():
    with pytest.raises(EvalError):
        f_beta(0.5, 0.5, 0.0)


def test_dataset_iou_third():
    assert abs(dataset_iou(1, 1, 1) - 1 / 3) < 1e-15


def test_dataset_iou_f1_identity():
    rng = np.random.default_rng(0)
    for _ in range(200):
        tp, fp, fn = (int(rng.integers(0, 20)) for _ in range(3))
        if tp + fp + fn == 0:
            continue
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f1 = f_beta(p, r, 1.0)
        assert abs(dataset_iou(tp, fp, fn) - f1 / (2 - f1)) < 1e-12


def test_dataset_iou_errors():
    with pytest.raises(EvalError):
        dataset_iou(0, 0, 0)
    with pytest.raises(EvalError):
        dataset_iou(-1, 0, 1)


# ---------------------------------------------------------------------------
# average precision


def test_ap_single_tp_is_one():
    d = {"a": [det((0, 0, 2, 2), 0.9)]}
    g = {"a": [gt((0, 0, 2, 2))]}
    assert average_precision(d, g) == 1.0


def test_ap_tp_then_fp_is_one():
    d = {"a": [det((0, 0, 2, 2), 0.9), det((4, 4, 6, 6), 0.8)]}
    g = {"a": [gt((0, 0, 2, 2))]}
    assert average_precision(d, g) == 1.0


def test_ap_fp_then_tp_is_half():
    d = {"a": [det((4, 4, 6, 6), 0.9), det((0, 0, 2, 2), 0.8)]}
    g = {"a": [gt((0, 0, 2, 2))]}
    assert average_precision(d, g) == 0.5


def test_ap_zero_gts_is_error():
    with pytest.raises(EvalError):
        average_precision({"a": []}, {"a": []})


def test_ap_cross_image_confidence_ordering():
    d = {"a": [det((4, 4, 6, 6), 0.9, image_id="a")],          # FP rank 1
         "b": [det((0, 0, 2, 2), 0.8, image_id="b")]}          # TP rank 2
    g = {"a": [], "b": [gt((0, 0, 2, 2), image_id="b")]}
    assert average_precision(d, g) == 0.5


def test_ap_curve_shapes():
    d = {"a": [det((0, 0, 2, 2), 0.9), det((4, 4, 6, 6), 0.8)]}
    g = {"a": [gt((0, 0, 2, 2)), gt((5, 5, 7, 7))]}
    ap, recalls, precisions = average_precision(d, g, return_curve=True)
    assert len(recalls) == 2 and len(precisions) == 2
    assert 0.0 <= ap <= 1.0


# ---------------------------------------------------------------------------
# evaluate


def test_evaluate_perfect_predictions_all_ones():
    g = {"a": [gt((0, 0, 3, 3), image_id="a")],
         "b": [gt((2, 2, 5, 5), image_id="b"), gt((6, 6, 8, 8), image_id="b")]}
    d = {img: [Detection(mask=x.mask.copy(), box=x.box, confidence=1.0,
                         image_id=img) for x in gts]
         for img, gts in g.items()}
    rep = evaluate(d, g)
    for blk in (rep.box, rep.mask):
        assert blk.precision == blk.recall == blk.f1 == 1.0
        assert blk.ap50 == blk.dataset_iou == 1.0
        assert not blk.degenerate
    assert rep.pixel_precision == rep.pixel_recall == 1.0


def test_evaluate_empty_predictions_degenerate():
    g = {"a": [gt((0, 0, 3, 3), image_id="a")]}
    rep = evaluate({"a": []}, g)
    assert rep.box.precision == 0.0 and rep.box.recall == 0.0
    assert rep.box.degenerate
    assert rep.pixel_recall == 0.0


def test_evaluate_rejects_mismatched_ids():
    with pytest.raises(EvalError):
        evaluate({"a": []}, {"b": []})


def test_evaluate_order_independent():
    rng = np.random.default_rng(1)
    g, d = {}, {}
    for i in range(6):
        img = f"im{i}"
        boxes = [(int(x), int(y), int(x) + 2, int(y) + 2)
                 for x, y in rng.integers(0, 6, size=(2, 2))]
        g[img] = [gt(b, image_id=img) for b in boxes]
        d[img] = [det(b, float(rng.uniform(0.3, 1.0)), image_id=img)
                  for b in boxes[:1]]
    rep1 = evaluate(d, g)
    order = list(g)[::-1]
    rep2 = evaluate({k: d[k] for k in order}, {k: g[k] for k in order})
    assert rep1.to_dict() == rep2.to_dict()


def test_report_json_and_csv_shape():
    g = {"a": [gt((0, 0, 3, 3), image_id="a")]}
    d = {"a": [det((0, 0, 3, 3), 0.9, image_id="a")]}
    rep = evaluate(d, g, config={"run": "unit"})
    parsed = __import__("json").loads(rep.to_json())
    assert set(parsed) == {"box", "mask", "pixel_precision", "pixel_recall",
                           "config"}
    rows = rep.csv_rows()
    assert rows[0] == "block,Precision,Recall,mAP_0.5,F1-Score,IoU"
    assert len(rows) == 3
    assert rows[1].startswith("box,") and rows[2].startswith("mask,")


def test_metric_block_fields_in_range():
    g = {"a": [gt((0, 0, 3, 3), image_id="a"), gt((5, 5, 8, 8), image_id="a")]}
    d = {"a": [det((0, 0, 3, 3), 0.9, image_id="a"),
               det((4, 0, 6, 2), 0.8, image_id="a")]}
    rep = evaluate(d, g)
    for blk in (rep.box, rep.mask):
        for v in (blk.precision, blk.recall, blk.f1, blk.ap50, blk.dataset_iou):
            assert 0.0 <= v <= 1.0
