"""Query denoising: noised ground-truth groups and their reconstruction loss.

Each group contributes one noised (label, box) query per ground-truth object.
Noise follows the center-shift / box-scale model: |dx| < lambda1*w/2,
|dy| < lambda1*h/2, and extents scaled uniformly in [1-lambda2, 1+lambda2];
labels flip to a uniformly chosen different class with probability p_flip.
Defaults: p_flip=0.2, lambda1=lambda2=0.4.

Denoising queries never interact with matching queries (both directions) nor
with other groups; the IsolationPlan records the block structure the decoder
enforces. At inference no groups are built, so outputs are bit-identical
with or without targets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from .losses import IndexOutOfRange, LossWeights, composite_loss


class InvalidOrigin(ValueError):
    pass


@dataclass(frozen=True)
class DenoiseConfig:
    p_flip: float = 0.2
    lambda1: float = 0.4
    lambda2: float = 0.4
    groups: int = 3

    def validate(self):
        for name in ("p_flip", "lambda1", "lambda2"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ValueError(f"{name} must be in [0, 1), got {v}")
        if self.groups < 0:
            raise ValueError(f"groups must be >= 0, got {self.groups}")
        return self


@dataclass
class DenoiseGroup:
    noised_labels: np.ndarray    # [G] class ids after flipping
    noised_boxes: np.ndarray     # [G, 4] sanitized cxcywh
    origin: np.ndarray           # [G] source ground-truth index per query
    group_id: int


@dataclass
class IsolationPlan:
    """Block structure of the decoder query axis.

    Queries [0, num_matching) are the matching partition; each following
    block is one denoising group. Attention is allowed only within a block
    (equivalent to an additive -inf mask everywhere else).
    """
    num_matching: int
    group_sizes: list = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.num_matching + sum(self.group_sizes)

    def blocks(self):
        """(start, stop) ranges: matching block first, then each group."""
        out = [(0, self.num_matching)]
        at = self.num_matching
        for s in self.group_sizes:
            out.append((at, at + s))
            at += s
        return out

    def allowed_mask(self) -> np.ndarray:
        """Boolean [total, total] attention mask (True = may attend)."""
        m = np.zeros((self.total, self.total), dtype=bool)
        for a, b in self.blocks():
            m[a:b, a:b] = True
        return m


def flip_label(label: int, num_classes: int, p_flip: float,
               rng: np.random.Generator) -> int:
    """With probability p_flip, a uniformly chosen different label."""
    if num_classes < 2:
        raise IndexOutOfRange(f"need >= 2 classes, got {num_classes}")
    if not 0 <= label < num_classes:
        raise IndexOutOfRange(f"label {label} not in [0, {num_classes})")
    if rng.random() < p_flip:
        other = int(rng.integers(num_classes - 1))
        return other + 1 if other >= label else other
    return int(label)


def noise_box(box, lambda1: float, lambda2: float,
              rng: np.random.Generator) -> np.ndarray:
    """Shift the center within the bound, scale extents, then sanitize.

    Draw order is fixed (dx, dy, sw, sh) so streams are reproducible.
    """
    cx, cy, w, h = np.asarray(box, dtype=np.float64)
    dx = rng.uniform(-1.0, 1.0) * lambda1 * w / 2
    dy = rng.uniform(-1.0, 1.0) * lambda1 * h / 2
    sw = rng.uniform(1.0 - lambda2, 1.0 + lambda2)
    sh = rng.uniform(1.0 - lambda2, 1.0 + lambda2)
    return G.sanitize(np.array([cx + dx, cy + dy, w * sw, h * sh]))


def build_dn_groups(targets, cfg: DenoiseConfig, num_classes: int,
                    rng: np.random.Generator):
    """Noised (label, box) query groups plus the attention isolation plan.

    ``num_matching`` on the plan is filled in by the model when it
    concatenates the partitions; here it is left at 0.
    """
    cfg.validate()
    g = len(targets.classes)
    groups = []
    for gid in range(cfg.groups):
        if g == 0:
            break
        labels = np.array([flip_label(int(c), num_classes, cfg.p_flip, rng)
                           for c in targets.classes], dtype=np.int64)
        boxes = np.stack([noise_box(b, cfg.lambda1, cfg.lambda2, rng)
                          for b in targets.boxes])
        groups.append(DenoiseGroup(labels, boxes, np.arange(g), gid))
    plan = IsolationPlan(0, [g] * len(groups))
    return groups, plan


def _check_origin(grp: DenoiseGroup, num_targets: int):
    n = len(grp.origin)
    if n != num_targets or sorted(set(int(o) for o in grp.origin)) != list(range(n)):
        raise InvalidOrigin(f"group {grp.group_id} origin is not a "
                            f"bijection over {num_targets} targets: "
                            f"{grp.origin}")


def dn_loss(class_logits, boxes, mask_logits, targets, groups,
            w: LossWeights, rng: np.random.Generator, n_points: int = 128,
            decoupled_stuff: bool = True, use_box: bool = True,
            use_mask: bool = True):
    """Reconstruction loss with the fixed origin assignment (no matching).

    Each denoising query is supervised against its origin object: true
    class, original box, original mask. Stuff objects follow the same
    decoupled box rule as matching queries. Computed per group (the fixed
    assignment is a bijection within each group) and averaged.
    """
    from . import tensor as T
    from .losses import weighted_terms

    g = len(targets.classes)
    expect = sum(len(grp.origin) for grp in groups)
    if expect != class_logits.shape[0]:
        raise InvalidOrigin(f"{expect} origins vs "
                            f"{class_logits.shape[0]} DN queries")
    if not groups:
        return T.tensor(0.0), {"cls": 0.0, "l1": 0.0, "giou": 0.0,
                               "ce": 0.0, "dice": 0.0, "matched": 0}
    pairs, at = [], 0
    for grp in groups:
        _check_origin(grp, g)
        pairs.extend((int(grp.origin[i]), at + i)
                     for i in range(len(grp.origin)))
        at += len(grp.origin)
    return weighted_terms(class_logits, boxes, mask_logits, targets,
                          sorted(pairs), w, rng, n_points, decoupled_stuff,
                          use_box, use_mask)
