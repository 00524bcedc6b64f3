"""Exact bipartite matching and the hybrid (cls + box + mask) cost matrix.

The solver is scipy's Jonker-Volgenant assignment (O(n^3) augmenting paths)
wrapped in a lexicographic canonicalization pass, so ties always resolve to
the lexicographically smallest pair list among optima. Costs are built from
detached prediction arrays; no gradient flows through the assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import geometry as G
from .losses import FOCAL_ALPHA, FOCAL_GAMMA, LossWeights


class TooManyTargets(ValueError):
    pass


@dataclass
class Assignment:
    pairs: list = field(default_factory=list)   # (target index, query index)
    total_cost: float = 0.0


@dataclass
class CostMatrix:
    values: np.ndarray          # [G, Q]
    cls: np.ndarray
    box: np.ndarray
    mask: np.ndarray


def _fold_total(cost, pairs) -> float:
    return float(sum(cost[g, q] for g, q in pairs))


def _solve(cost) -> list:
    rows, cols = linear_sum_assignment(cost)
    return list(zip(rows.tolist(), cols.tolist()))


def hungarian(cost) -> Assignment:
    """Globally minimal injective target -> query assignment.

    Ties break to the lexicographically smallest pair list: each row in turn
    takes the smallest column that still admits an optimal completion.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2D, got shape {cost.shape}")
    g, q = cost.shape
    if g == 0:
        return Assignment([], 0.0)
    if g > q:
        raise TooManyTargets(f"{g} targets but only {q} queries")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix has non-finite entries")

    best = _fold_total(cost, _solve(cost))
    tol = 1e-9 * (1.0 + abs(best))
    chosen = []
    free_cols = list(range(q))
    for row in range(g):
        for j, col in enumerate(free_cols):
            rest_cols = free_cols[:j] + free_cols[j + 1:]
            sub = cost[np.ix_(range(row + 1, g), rest_cols)]
            if sub.shape[0]:
                sub_pairs = [(row + 1 + r, rest_cols[c]) for r, c in _solve(sub)]
            else:
                sub_pairs = []
            cand = chosen + [(row, col)] + sub_pairs
            if _fold_total(cost, cand) <= best + tol:
                chosen.append((row, col))
                free_cols.pop(j)
                break
        else:
            raise AssertionError("no optimal completion found")  # unreachable
    return Assignment(chosen, _fold_total(cost, chosen))


def _sigmoid(x):
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                    np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))


def _bce_with_logits(z, t):
    # softplus(-z)*t + softplus(z)*(1-t), stable
    return np.logaddexp(0.0, -z) * t + np.logaddexp(0.0, z) * (1.0 - t)


def focal_cost(class_logits, target_classes) -> np.ndarray:
    """Focal-style classification cost [G, Q]: positive minus negative term."""
    p = _sigmoid(np.asarray(class_logits, dtype=np.float64))
    pos = FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * -np.log(np.maximum(p, 1e-12))
    neg = (1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * -np.log(np.maximum(1 - p, 1e-12))
    tc = np.asarray(target_classes, dtype=np.int64)
    return (pos - neg)[:, tc].T


def mask_cost(mask_logits, gt_masks, w: LossWeights, rng,
              n_points: int = 128) -> np.ndarray:
    """Point-sampled CE + dice cost [G, Q]; one shared point set per target."""
    ml = np.asarray(mask_logits, dtype=np.float64)
    qn, h, wd = ml.shape
    out = np.zeros((len(gt_masks), qn))
    for g, gt in enumerate(gt_masks):
        pts = rng.uniform(0.0, 1.0, size=(n_points, 2))
        px = np.clip(pts[:, 0] * wd - 0.5, 0, wd - 1)
        py = np.clip(pts[:, 1] * h - 0.5, 0, h - 1)
        x0 = np.floor(px).astype(int)
        y0 = np.floor(py).astype(int)
        x1, y1 = np.minimum(x0 + 1, wd - 1), np.minimum(y0 + 1, h - 1)
        fx, fy = px - x0, py - y0
        samp = ((ml[:, y0, x0] * (1 - fx) + ml[:, y0, x1] * fx) * (1 - fy)
                + (ml[:, y1, x0] * (1 - fx) + ml[:, y1, x1] * fx) * fy)  # [Q,P]
        gx = np.minimum((pts[:, 0] * wd).astype(int), wd - 1)
        gy = np.minimum((pts[:, 1] * h).astype(int), h - 1)
        tgt = np.asarray(gt)[gy, gx].astype(np.float64)[None, :]
        ce = _bce_with_logits(samp, tgt).mean(axis=1)
        prob = _sigmoid(samp)
        dice = 1.0 - (2 * (prob * tgt).sum(axis=1) + 1) / (
            prob.sum(axis=1) + tgt.sum() + 1)
        out[g] = w.lambda_ce * ce + w.lambda_dice * dice
    return out


def build_cost_matrix(class_logits, boxes, mask_logits, targets,
                      w: LossWeights, rng, mode: str = "hybrid",
                      decoupled_stuff: bool = True,
                      stuff_box_cost: str = "grand_mean",
                      n_points: int = 128) -> CostMatrix:
    """Hybrid matching cost over detached prediction arrays.

    ``mode`` picks the components: "hybrid" (cls+box+mask), "box", or "mask"
    (classification always participates). With decoupling on, each stuff
    row's box component is replaced by the mean box cost over thing rows
    (grand mean by default, per-query row mean with ``row_mean``); scenes
    with no thing targets get stuff box components of exactly 0.
    """
    if mode not in ("hybrid", "box", "mask"):
        raise ValueError(f"unknown matching mode {mode!r}")
    gt_n = len(targets.classes)
    qn = np.asarray(class_logits).shape[0]
    cls = focal_cost(class_logits, targets.classes) if gt_n else np.zeros((0, qn))
    l1, giou_c = G.pairwise_costs(np.asarray(boxes), targets.boxes) \
        if gt_n else (np.zeros((qn, 0)), np.zeros((qn, 0)))
    box = (w.lambda_l1 * l1 + w.lambda_giou * giou_c).T
    if decoupled_stuff and gt_n:
        is_thing = np.asarray(targets.is_thing, dtype=bool)
        if not is_thing.all():
            if is_thing.any():
                if stuff_box_cost == "grand_mean":
                    repl = float(box[is_thing].mean())
                else:
                    repl = box[is_thing].mean(axis=0)
            else:
                repl = 0.0
            box[~is_thing] = repl
    use_mask_term = mode in ("hybrid", "mask") and gt_n
    mask = mask_cost(mask_logits, targets.masks, w, rng, n_points) \
        if use_mask_term else np.zeros((gt_n, qn))
    values = w.lambda_cls * cls
    if mode in ("hybrid", "box"):
        values = values + box
    if mode in ("hybrid", "mask"):
        values = values + mask
    return CostMatrix(values=values, cls=cls, box=box, mask=mask)


def match(class_logits, boxes, mask_logits, targets, w: LossWeights, rng,
          mode: str = "hybrid", decoupled_stuff: bool = True,
          stuff_box_cost: str = "grand_mean", n_points: int = 128) -> Assignment:
    cm = build_cost_matrix(class_logits, boxes, mask_logits, targets, w, rng,
                           mode, decoupled_stuff, stuff_box_cost, n_points)
    return hungarian(cm.values)
