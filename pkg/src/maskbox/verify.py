"""End-to-end gradient verification of the full training loss.

Builds the micro model in 64-bit mode, freezes the bipartite assignments
(the assignment is an argmin over detached costs, so it is piecewise
constant; freezing it makes the checked function differentiable), fixes
every noise stream, and runs central differences over a seeded subsample of
every parameter tensor. Entries sitting on genuine kinks (top-k selection
flips, mask-threshold crossings) are reported as excluded, not failed.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .config import RunConfig, micro_config
from .denoise import dn_loss
from .losses import composite_loss
from .matching import match
from .model import Model
from .scenes import SceneConfig, generate_scene


def micro_scene(cfg: RunConfig, seed: int = 5):
    return generate_scene(
        SceneConfig(image_size=cfg.image_size, thing_min=1, thing_max=2),
        np.random.default_rng(seed))


def full_loss_gradcheck(cfg: RunConfig | None = None, eps: float = 1e-5,
                        max_entries: int = 3, seed: int = 0):
    """Finite-difference check of the composite + denoising loss.

    Returns the GradCheckReport; `report.worst < 1e-4` is the pass bar.
    """
    cfg = (cfg or micro_config()).validate()
    with T.precision(np.float64):
        scene = micro_scene(cfg)
        model = Model(cfg, np.random.default_rng(cfg.seed))
        w = cfg.loss_weights()

        # freeze the per-layer assignments at the unperturbed point
        first = model.forward(scene.image, targets=scene,
                              rng=np.random.default_rng(seed + 1))
        frozen = {}
        for key in first.layer_keys():
            lp = first.matching[key]
            frozen[key] = match(lp.class_logits.data, lp.boxes.data,
                                lp.mask_logits.data, scene, w,
                                np.random.default_rng(seed + 2),
                                mode=cfg.hybrid_matching_mode,
                                decoupled_stuff=cfg.decoupled_stuff,
                                n_points=cfg.points_per_pair).pairs

        def f():
            preds = model.forward(scene.image, targets=scene,
                                  rng=np.random.default_rng(seed + 1))
            pts_rng = np.random.default_rng(seed + 3)
            totals = []
            for key in preds.layer_keys():
                lp = preds.matching[key]
                loss, _ = composite_loss(
                    lp.class_logits, lp.boxes, lp.mask_logits, scene,
                    frozen[key], w, pts_rng, n_points=cfg.points_per_pair,
                    decoupled_stuff=cfg.decoupled_stuff)
                totals.append(loss)
            if preds.dn:
                for li in sorted(preds.dn):
                    lp = preds.dn[li]
                    loss, _ = dn_loss(lp.class_logits, lp.boxes,
                                      lp.mask_logits, scene, preds.dn_groups,
                                      w, pts_rng,
                                      n_points=cfg.points_per_pair,
                                      decoupled_stuff=cfg.decoupled_stuff)
                    totals.append(loss)
            out = totals[0]
            for t in totals[1:]:
                out = T.add(out, t)
            return out

        report = T.finite_diff_check(f, model.parameters(), eps=eps,
                                     max_entries=max_entries,
                                     rng=np.random.default_rng(seed + 4))
    return report
