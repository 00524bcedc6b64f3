"""Denoising contracts: noise bounds, flip statistics, group structure."""

from types import SimpleNamespace

import numpy as np
import pytest

from maskbox import geometry as G
from maskbox import tensor as T
from maskbox.denoise import (
    DenoiseConfig, InvalidOrigin, build_dn_groups, dn_loss, flip_label,
    noise_box,
)
from maskbox.losses import IndexOutOfRange, LossWeights, composite_loss


def make_targets(classes, is_thing, boxes, masks):
    return SimpleNamespace(classes=list(classes), is_thing=list(is_thing),
                           boxes=np.asarray(boxes, dtype=np.float64),
                           masks=[np.asarray(m) for m in masks])


def test_config_defaults_and_validation():
    cfg = DenoiseConfig()
    assert (cfg.p_flip, cfg.lambda1, cfg.lambda2) == (0.2, 0.4, 0.4)
    with pytest.raises(ValueError):
        DenoiseConfig(p_flip=1.0).validate()


def test_flip_label_degenerate_probabilities():
    rng = np.random.default_rng(0)
    assert all(flip_label(3, 5, 0.0, rng) == 3 for _ in range(100))
    assert all(flip_label(3, 5, 1.0, rng) != 3 for _ in range(100))


def test_flip_label_frequency():
    rng = np.random.default_rng(1)
    n = 100_000
    flips = sum(flip_label(2, 7, 0.2, rng) != 2 for _ in range(n))
    assert flips / n == pytest.approx(0.2, abs=0.005)


def test_flip_label_bad_input():
    with pytest.raises(IndexOutOfRange):
        flip_label(5, 5, 0.2, np.random.default_rng(0))
    with pytest.raises(IndexOutOfRange):
        flip_label(0, 1, 0.2, np.random.default_rng(0))


def test_noise_box_zero_noise_is_identity():
    rng = np.random.default_rng(2)
    b = np.array([0.4, 0.6, 0.2, 0.3])
    np.testing.assert_allclose(noise_box(b, 0.0, 0.0, rng), b, atol=1e-12)


def test_noise_box_bounds_100k_samples():
    rng = np.random.default_rng(3)
    b = np.array([0.5, 0.5, 0.2, 0.2])
    lam = 0.4
    n = 100_000
    dx = np.empty(n)
    ws = np.empty(n)
    for i in range(n):
        out = noise_box(b, lam, lam, rng)
        dx[i] = out[0] - 0.5
        ws[i] = out[2]
    assert np.abs(dx).max() < lam * 0.2 / 2          # |dx| < lambda1 * w / 2
    assert ws.min() >= 0.2 * (1 - lam) - 1e-12
    assert ws.max() <= 0.2 * (1 + lam) + 1e-12


def test_noise_box_scale_uniformity_ks():
    # KS test at the 1% level against Uniform(0.12, 0.28) for w = 0.2
    rng = np.random.default_rng(4)
    n = 100_000
    ws = np.array([noise_box(np.array([0.5, 0.5, 0.2, 0.2]), 0.0, 0.4, rng)[2]
                   for i in range(n)])
    u = (ws - 0.12) / 0.16
    u.sort()
    ecdf_hi = np.abs(np.arange(1, n + 1) / n - u).max()
    ecdf_lo = np.abs(np.arange(0, n) / n - u).max()
    ks = max(ecdf_hi, ecdf_lo) * np.sqrt(n)
    assert ks < 1.63          # 1% critical value of the KS statistic


def _scene(g=3):
    h = w = 8
    masks, boxes = [], []
    for i in range(g):
        m = np.zeros((h, w), dtype=bool)
        m[i * 2:i * 2 + 2, 1:5] = True
        masks.append(m)
        boxes.append(G.mask_to_box(m).as_array())
    return make_targets(list(range(g)), [True] * g, boxes, masks)


def test_build_dn_groups_counts_and_bijection():
    targets = _scene(3)
    groups, plan = build_dn_groups(targets, DenoiseConfig(groups=2), 5,
                                   np.random.default_rng(5))
    assert len(groups) == 2
    assert all(len(g.origin) == 3 for g in groups)
    assert all(sorted(g.origin.tolist()) == [0, 1, 2] for g in groups)
    assert plan.group_sizes == [3, 3]


def test_build_dn_groups_empty_scene():
    targets = make_targets([], [], np.zeros((0, 4)), [])
    groups, plan = build_dn_groups(targets, DenoiseConfig(), 5,
                                   np.random.default_rng(6))
    assert groups == [] and plan.group_sizes == []


def test_isolation_plan_mask_is_block_diagonal():
    from maskbox.denoise import IsolationPlan
    plan = IsolationPlan(2, [2, 1])
    m = plan.allowed_mask()
    expect = np.zeros((5, 5), dtype=bool)
    expect[0:2, 0:2] = True
    expect[2:4, 2:4] = True
    expect[4:5, 4:5] = True
    np.testing.assert_array_equal(m, expect)


def test_dn_loss_equals_composite_on_single_object():
    with T.precision(np.float64):
        targets = _scene(1)
        rng = np.random.default_rng(7)
        cls = T.tensor(rng.normal(size=(1, 5)), requires_grad=True)
        boxes = T.tensor(rng.uniform(0.3, 0.7, size=(1, 4)), requires_grad=True)
        masks = T.tensor(rng.normal(size=(1, 8, 8)), requires_grad=True)
        groups, _ = build_dn_groups(targets, DenoiseConfig(groups=1), 5,
                                    np.random.default_rng(8))
        total, rep = dn_loss(cls, boxes, masks, targets, groups, LossWeights(),
                             np.random.default_rng(9), n_points=32)
        ref, _ = composite_loss(cls, boxes, masks, targets, [(0, 0)],
                                LossWeights(), np.random.default_rng(9),
                                n_points=32)
        assert total.item() == pytest.approx(ref.item(), rel=1e-12)


def test_dn_loss_zero_noise_echo_decoder_box_term_near_zero():
    # a stub decoder that echoes its noised anchor gets ~0 box loss at zero noise
    with T.precision(np.float64):
        targets = _scene(2)
        groups, _ = build_dn_groups(
            targets, DenoiseConfig(p_flip=0.0, lambda1=0.0, lambda2=0.0,
                                   groups=1), 5, np.random.default_rng(10))
        echo_boxes = T.tensor(groups[0].noised_boxes)
        cls = T.tensor(np.zeros((2, 5)))
        masks = T.tensor(np.zeros((2, 8, 8)))
        _, rep = dn_loss(cls, echo_boxes, masks, targets, groups, LossWeights(),
                         np.random.default_rng(11), n_points=32)
        assert rep["l1"] < 1e-3 and rep["giou"] < 1e-3


def test_dn_loss_stuff_decoupled():
    with T.precision(np.float64):
        targets = _scene(2)
        targets.is_thing = [False, False]
        rng = np.random.default_rng(12)
        cls = T.tensor(rng.normal(size=(2, 5)), requires_grad=True)
        boxes = T.tensor(rng.uniform(0.3, 0.7, size=(2, 4)), requires_grad=True)
        masks = T.tensor(rng.normal(size=(2, 8, 8)), requires_grad=True)
        groups, _ = build_dn_groups(targets, DenoiseConfig(groups=1), 5,
                                    np.random.default_rng(13))
        total, rep = dn_loss(cls, boxes, masks, targets, groups, LossWeights(),
                             np.random.default_rng(14))
        assert rep["l1"] == 0.0 and rep["giou"] == 0.0
        T.backward(total)
        assert boxes.grad is None or not boxes.grad.any()


def test_dn_loss_invalid_origin():
    with T.precision(np.float64):
        targets = _scene(2)
        groups, _ = build_dn_groups(targets, DenoiseConfig(groups=1), 5,
                                    np.random.default_rng(15))
        groups[0].origin = np.array([0, 0])
        cls = T.tensor(np.zeros((2, 5)))
        with pytest.raises(InvalidOrigin):
            dn_loss(cls, T.tensor(np.full((2, 4), 0.5)),
                    T.tensor(np.zeros((2, 8, 8))), targets, groups,
                    LossWeights(), np.random.default_rng(16))
