"""Training losses: focal classification, L1+GIoU box, point-sampled CE+dice
mask, and their weighted composition over a matched prediction/target set.

Default weights are (cls, l1, giou, ce, dice) = (4, 5, 2, 5, 5).
Classification is averaged over queries; box and mask terms are averaged
over the matched pairs that contribute them, which keeps scales stable as
the target count varies. With stuff decoupling on, stuff targets contribute
no box terms at all.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry as G
from . import tensor as T

BACKGROUND = -1          # class sentinel for unmatched queries
FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0


class IndexOutOfRange(ValueError):
    pass


class CountMismatch(ValueError):
    pass


class InvalidAssignment(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 4.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0


def focal_loss(logits: T.Tensor, target_class, alpha=FOCAL_ALPHA,
               gamma=FOCAL_GAMMA) -> T.Tensor:
    """Sigmoid focal loss, summed over classes and averaged over queries.

    ``target_class`` holds one class id per query, with BACKGROUND meaning
    all-negative. ``alpha=None`` disables the alpha weighting; ``gamma=0``
    with alpha disabled reduces to plain binary cross-entropy.
    """
    n, k = logits.shape
    tc = np.asarray(target_class, dtype=np.int64)
    if tc.shape != (n,):
        raise CountMismatch(f"{n} queries vs {tc.shape} targets")
    if tc.size and (tc.min() < BACKGROUND or tc.max() >= k):
        raise IndexOutOfRange(f"class ids must be in [-1, {k}), got "
                              f"[{tc.min()}, {tc.max()}]")
    onehot = np.zeros((n, k), dtype=np.float64)
    pos = tc >= 0
    onehot[np.nonzero(pos)[0], tc[pos]] = 1.0

    p = T.sigmoid(logits)
    pos_ll = T.softplus(T.neg(logits))      # -log p
    neg_ll = T.softplus(logits)             # -log (1 - p)
    if gamma != 0.0:
        pos_ll = T.mul(pos_ll, T.powf(T.sub(1.0, p), gamma))
        neg_ll = T.mul(neg_ll, T.powf(p, gamma))
    a_pos, a_neg = (1.0, 1.0) if alpha is None else (alpha, 1.0 - alpha)
    per = T.add(T.mul(pos_ll, onehot * a_pos),
                T.mul(neg_ll, (1.0 - onehot) * a_neg))
    return T.div(per.sum(), float(n))


def box_loss(pred: T.Tensor, gt, w: LossWeights) -> T.Tensor:
    """lambda_l1 * mean L1(cxcywh) + lambda_giou * mean(1 - giou)."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if pred.shape != gt.shape:
        raise CountMismatch(f"pred {pred.shape} vs gt {gt.shape}")
    l1 = T.absval(T.sub(pred, gt)).sum(axis=1).mean()
    gv = G.giou_pairs_t(G.corners_t(pred), G.to_corners(gt))
    return T.add(T.mul(l1, w.lambda_l1),
                 T.mul(T.sub(1.0, gv).mean(), w.lambda_giou))


def sample_points(n_points: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform normalized (x, y) sample points; deterministic given rng."""
    return rng.uniform(0.0, 1.0, size=(n_points, 2))


def point_sample_pair(pred_logits: T.Tensor, gt_mask, n_points: int,
                      rng: np.random.Generator):
    """Read one point set off both maps: bilinear (pred), nearest pixel (gt).

    Returns (sampled logits Tensor [P], sampled targets array [P]).
    """
    if pred_logits.ndim != 2:
        raise CountMismatch(f"pred mask must be [H, W], got {pred_logits.shape}")
    gt = np.asarray(gt_mask)
    if gt.shape != pred_logits.shape:
        raise CountMismatch(f"pred {pred_logits.shape} vs gt {gt.shape}")
    h, w = gt.shape
    pts = sample_points(n_points, rng)
    sampled = T.sample_bilinear(
        T.reshape(pred_logits, (1, h, w)), T.tensor(pts))
    ix = np.minimum((pts[:, 0] * w).astype(np.int64), w - 1)
    iy = np.minimum((pts[:, 1] * h).astype(np.int64), h - 1)
    return T.reshape(sampled, (-1,)), gt[iy, ix].astype(np.float64)


def mask_ce_loss(sampled_logits: T.Tensor, sampled_targets) -> T.Tensor:
    """Mean binary cross-entropy with logits."""
    t = np.asarray(sampled_targets, dtype=np.float64)
    if sampled_logits.shape != t.shape:
        raise CountMismatch(f"{sampled_logits.shape} vs {t.shape}")
    per = T.add(T.mul(T.softplus(T.neg(sampled_logits)), t),
                T.mul(T.softplus(sampled_logits), 1.0 - t))
    return per.mean()


def dice_loss(sampled_probs: T.Tensor, sampled_targets) -> T.Tensor:
    """1 - (2*sum(p*t) + 1) / (sum(p) + sum(t) + 1)."""
    t = np.asarray(sampled_targets, dtype=np.float64)
    if sampled_probs.shape != t.shape:
        raise CountMismatch(f"{sampled_probs.shape} vs {t.shape}")
    num = T.add(T.mul(T.mul(sampled_probs, t).sum(), 2.0), 1.0)
    den = T.add(T.add(sampled_probs.sum(), float(t.sum())), 1.0)
    return T.sub(1.0, T.div(num, den))


def _zero() -> T.Tensor:
    return T.tensor(0.0)


def composite_loss(class_logits: T.Tensor, boxes: T.Tensor,
                   mask_logits: T.Tensor, targets, assignment_pairs,
                   w: LossWeights, rng: np.random.Generator,
                   n_points: int = 128, decoupled_stuff: bool = True,
                   use_box: bool = True, use_mask: bool = True):
    """Weighted sum of all terms for one prediction layer.

    ``targets`` needs .classes, .is_thing, .boxes, .masks (see scenes module);
    ``assignment_pairs`` is a list of (target index, query index). Unmatched
    queries contribute classification-to-background only. Returns the scalar
    Tensor plus a report of each unweighted term.
    """
    q = class_logits.shape[0]
    g = len(targets.classes)
    pairs = sorted(assignment_pairs)
    t_idx = [t for t, _ in pairs]
    q_idx = [qq for _, qq in pairs]
    if len(set(t_idx)) != len(t_idx) or len(set(q_idx)) != len(q_idx):
        raise InvalidAssignment("assignment must be injective")
    if pairs and (min(t_idx) < 0 or max(t_idx) >= g
                  or min(q_idx) < 0 or max(q_idx) >= q):
        raise InvalidAssignment("assignment index out of range")
    return weighted_terms(class_logits, boxes, mask_logits, targets, pairs,
                          w, rng, n_points, decoupled_stuff, use_box,
                          use_mask)


def weighted_terms(class_logits, boxes, mask_logits, targets, pairs,
                   w: LossWeights, rng, n_points, decoupled_stuff,
                   use_box, use_mask):
    """Core of composite_loss; also reused by the denoising loss, whose
    fixed origin map repeats target indices across groups."""
    q = class_logits.shape[0]
    target_class = np.full(q, BACKGROUND, dtype=np.int64)
    for t, qq in pairs:
        target_class[qq] = targets.classes[t]
    cls = focal_loss(class_logits, target_class)

    l1 = giou_term = ce = dice = _zero()
    if pairs and use_box:
        box_pairs = [(t, qq) for t, qq in pairs
                     if targets.is_thing[t] or not decoupled_stuff]
        if box_pairs:
            pb = T.gather_rows(boxes, [qq for _, qq in box_pairs])
            gb = np.stack([targets.boxes[t] for t, _ in box_pairs])
            l1 = T.absval(T.sub(pb, gb)).sum(axis=1).mean()
            gv = G.giou_pairs_t(G.corners_t(pb), G.to_corners(gb))
            giou_term = T.sub(1.0, gv).mean()
    if pairs and use_mask:
        ce, dice = _batched_point_mask_terms(mask_logits, targets, pairs,
                                             n_points, rng)

    total = T.mul(cls, w.lambda_cls)
    total = T.add(total, T.add(T.mul(l1, w.lambda_l1),
                               T.mul(giou_term, w.lambda_giou)))
    total = T.add(total, T.add(T.mul(ce, w.lambda_ce),
                               T.mul(dice, w.lambda_dice)))
    report = {"cls": cls.item(), "l1": l1.item(), "giou": giou_term.item(),
              "ce": ce.item(), "dice": dice.item(), "matched": len(pairs)}
    return total, report


def _sum(ts):
    out = ts[0]
    for t in ts[1:]:
        out = T.add(out, t)
    return out


def _batched_point_mask_terms(mask_logits, targets, pairs, n_points, rng):
    """CE and dice over all matched pairs in one sampling pass.

    Point streams are drawn pair by pair (identical to calling
    point_sample_pair per pair), but the bilinear read happens once on the
    pair-gathered mask stack; each pair's own samples sit on the block
    diagonal of the [pairs*points, pairs] result.
    """
    npair = len(pairs)
    h, w = mask_logits.shape[1], mask_logits.shape[2]
    pair_maps = T.gather_rows(mask_logits, [q for _, q in pairs])
    pts = np.concatenate([sample_points(n_points, rng) for _ in pairs])
    samp = T.sample_bilinear(pair_maps, T.tensor(pts))      # [N*P, N]
    diag = np.arange(npair * n_points) * npair \
        + np.repeat(np.arange(npair), n_points)
    logits = T.reshape(
        T.gather_rows(T.reshape(samp, (npair * n_points * npair, 1)), diag),
        (npair, n_points))
    tgt = np.empty((npair, n_points))
    for i, (t, _) in enumerate(pairs):
        block = pts[i * n_points:(i + 1) * n_points]
        ix = np.minimum((block[:, 0] * w).astype(np.int64), w - 1)
        iy = np.minimum((block[:, 1] * h).astype(np.int64), h - 1)
        tgt[i] = np.asarray(targets.masks[t])[iy, ix]
    per_pt = T.add(T.mul(T.softplus(T.neg(logits)), tgt),
                   T.mul(T.softplus(logits), 1.0 - tgt))
    ce = per_pt.mean(axis=1).mean()
    probs = T.sigmoid(logits)
    num = T.add(T.mul(T.mul(probs, tgt).sum(axis=1), 2.0), 1.0)
    den = T.add(T.add(probs.sum(axis=1), tgt.sum(axis=1)), 1.0)
    dice = T.sub(1.0, T.div(num, den)).mean()
    return ce, dice
