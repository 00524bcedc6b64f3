"""Metric oracles: hand-built PR curves, PQ fixtures, pixel counting."""

import numpy as np
import pytest

from maskbox import geometry as G
from maskbox.metrics import (
    IOU_THRESHOLDS, LabelOutOfRange, MapExtentMismatch, PQStat,
    average_precision, mask_iou_single, mean_iou, panoptic_quality,
)


def det(cls, score, box):
    return {"class": cls, "score": score, "box": np.asarray(box, float)}


def gt(cls, box):
    return {"class": cls, "box": np.asarray(box, float)}


BOX = np.array([0.5, 0.5, 0.4, 0.4])


def test_ap_perfect_single():
    r = average_precision([[det(0, 0.9, BOX)]], [[gt(0, BOX)]])
    assert r["ap"] == pytest.approx(1.0)
    assert r["ap50"] == pytest.approx(1.0)


def test_ap_spurious_higher_scored():
    # one GT; correct detection at IoU .9 outscored by a far-off spurious one.
    # PR: first point precision 0 (FP), second recall 1 at precision 1/2.
    good = BOX * np.array([1, 1, 0.95, 0.95]) + np.array([0.0, 0.005, 0, 0])
    assert G.iou(good, BOX) > 0.85
    far = np.array([0.1, 0.1, 0.1, 0.1])
    r = average_precision([[det(0, 0.95, far), det(0, 0.9, good)]],
                          [[gt(0, BOX)]])
    assert r["ap50"] == pytest.approx(0.5, abs=0.005)


def test_ap_no_predictions():
    r = average_precision([[]], [[gt(0, BOX)]])
    assert r["ap"] == 0.0


def test_ap_monotone_in_threshold():
    rng = np.random.default_rng(0)
    preds, gts = [], []
    for _ in range(8):
        gts.append([gt(0, np.array([0.5, 0.5, 0.3, 0.3]))])
        jitter = rng.normal(scale=0.03, size=4)
        preds.append([det(0, float(rng.random()),
                          np.clip(np.array([0.5, 0.5, 0.3, 0.3]) + jitter,
                                  0.05, 0.95))])
    vals = [average_precision(preds, gts, thresholds=(t,))["ap"]
            for t in IOU_THRESHOLDS]
    assert all(a >= b - 1e-12 for a, b in zip(vals, vals[1:]))


def test_ap_order_invariance():
    rng = np.random.default_rng(1)
    preds = [[det(0, 0.8, BOX), det(0, 0.6, BOX * 0.9), det(1, 0.7, BOX)]]
    gts = [[gt(0, BOX), gt(1, BOX)]]
    r1 = average_precision(preds, gts)
    shuffled = [list(reversed(preds[0]))]
    r2 = average_precision(shuffled, gts)
    assert r1["ap"] == r2["ap"]


def test_ap_mask_kind():
    m = np.zeros((8, 8), dtype=bool)
    m[2:6, 2:6] = True
    preds = [[{"class": 0, "score": 0.9, "mask": m}]]
    gts = [[{"class": 0, "mask": m.copy()}]]
    r = average_precision(preds, gts, kind="mask")
    assert r["ap"] == pytest.approx(1.0)
    assert mask_iou_single(m, ~m) == 0.0


def seg_maps_for_pq():
    """One GT segment; one pred overlapping at IoU 0.6 plus one FP."""
    gtm = np.zeros((10, 10), dtype=np.int32)
    gtm[0:5, 0:8] = 1                       # area 40
    pm = np.zeros((10, 10), dtype=np.int32)
    pm[0:5, 2:10] = 1                       # area 40, overlap 30 -> IoU 30/50
    pm[5:7, 0:5] = 2                        # same-class FP
    gt_table = [{"id": 1, "class": 0, "is_thing": True}]
    pred_table = [{"id": 1, "class": 0, "is_thing": True},
                  {"id": 2, "class": 0, "is_thing": True}]
    return pm, pred_table, gtm, gt_table


def test_pq_identity():
    gtm = np.zeros((6, 6), dtype=np.int32)
    gtm[:3] = 1
    gtm[3:] = 2
    table = [{"id": 1, "class": 0, "is_thing": True},
             {"id": 2, "class": 3, "is_thing": False}]
    r = panoptic_quality([gtm], [table], [gtm], [table], thing_classes={0, 1, 2})
    assert r["pq"] == pytest.approx(1.0)
    assert r["pq_thing"] == pytest.approx(1.0)
    assert r["pq_stuff"] == pytest.approx(1.0)


def test_pq_constructed_0p4():
    pm, pt, gtm, gt_t = seg_maps_for_pq()
    r = panoptic_quality([pm], [pt], [gtm], [gt_t], thing_classes={0, 1, 2})
    assert r["pq"] == pytest.approx(0.6 / 1.5, abs=1e-6)
    assert r["tp"] == 1 and r["fp"] == 1 and r["fn"] == 0


def test_pq_all_below_half_iou():
    gtm = np.zeros((10, 10), dtype=np.int32)
    gtm[0:5] = 1
    pm = np.zeros((10, 10), dtype=np.int32)
    pm[3:10] = 1          # overlap 20, union 100 -> IoU 0.2 < 0.5
    table = [{"id": 1, "class": 0, "is_thing": True}]
    r = panoptic_quality([pm], [table], [gtm], [table], thing_classes={0})
    assert r["pq"] == 0.0 and r["tp"] == 0


def test_pq_extent_mismatch():
    with pytest.raises(MapExtentMismatch):
        PQStat().add_image(np.zeros((4, 4), int), [], np.zeros((5, 5), int), [])


def test_pq_no_double_match_over_random_maps():
    rng = np.random.default_rng(2)
    for _ in range(30):
        gtm = rng.integers(0, 4, size=(12, 12)).astype(np.int32)
        pm = rng.integers(0, 4, size=(12, 12)).astype(np.int32)
        gt_table = [{"id": i, "class": rng.integers(0, 2), "is_thing": True}
                    for i in range(1, 4) if (gtm == i).any()]
        pred_table = [{"id": i, "class": rng.integers(0, 2), "is_thing": True}
                      for i in range(1, 4) if (pm == i).any()]
        PQStat().add_image(pm, pred_table, gtm, gt_table)  # asserts internally


def test_miou_identity_and_shift():
    a = np.zeros((8, 8), dtype=np.int32)
    a[:, 4:] = 1
    r = mean_iou([a], [a], num_classes=3)
    assert r["miou"] == pytest.approx(1.0)
    assert 2 not in r["per_class"]          # absent class excluded
    # two-class half/half pattern, prediction shifted by half a class width:
    # per class intersection 1 column of 3 in play -> IoU 1/3
    gt_row = np.tile(np.array([0, 0, 1, 1], dtype=np.int32), (8, 1))
    pred_row = np.roll(gt_row, 1, axis=1)
    r2 = mean_iou([pred_row], [gt_row], num_classes=2)
    assert r2["miou"] == pytest.approx(1 / 3)
    assert r2["per_class"][0] == pytest.approx(1 / 3)


def test_miou_label_out_of_range():
    with pytest.raises(LabelOutOfRange):
        mean_iou([np.full((4, 4), 7)], [np.zeros((4, 4), int)], num_classes=3)
