"""Training loop: per-layer hybrid matching, composite + denoising losses
summed over every supervised layer (encoder output plus each decoder layer),
adaptive-moment updates, and lr drops at the 0.9/0.95 fractions of total
steps.

Determinism contract: one master seed spawns the init and training streams;
scenes are shuffled per epoch and losses accumulate in batch order, so a
fixed (seed, config, data) triple reproduces the loss log byte for byte.
Checkpoints land at epoch boundaries and carry parameters, optimizer
moments, the step counter, and the training RNG state, so a resumed run
continues on the identical trajectory.
"""

from __future__ import annotations

import json
import math
import os

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .denoise import dn_loss
from .losses import composite_loss
from .matching import match
from .model import Model, PredictionSet


class TrainDiverged(RuntimeError):
    """Loss became non-finite; carries a diagnostic payload."""

    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


class Adam:
    """Adaptive-moment optimizer over a named parameter table."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999,
                 eps=1e-8):
        self.params = dict(sorted(params.items()))
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            mhat = self.m[name] / b1c
            vhat = self.v[name] / b2c
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_arrays(self) -> dict:
        out = {}
        for name in self.params:
            out[f"adam_m/{name}"] = self.m[name]
            out[f"adam_v/{name}"] = self.v[name]
        return out

    def load_state_arrays(self, arrays: dict, t: int):
        self.t = t
        for name in self.params:
            if f"adam_m/{name}" in arrays:
                self.m[name] = arrays[f"adam_m/{name}"].astype(
                    self.m[name].dtype).reshape(self.m[name].shape)
                self.v[name] = arrays[f"adam_v/{name}"].astype(
                    self.v[name].dtype).reshape(self.v[name].shape)


def effective_match_mode(cfg: RunConfig) -> str:
    """Single-task training restricts the matching cost to that task."""
    if cfg.tasks == "box":
        return "box"
    if cfg.tasks == "mask":
        return "mask"
    return cfg.hybrid_matching_mode


def scene_loss(model: Model, scene, cfg: RunConfig, rng: np.random.Generator):
    """Forward one scene and sum losses over all supervised layers."""
    preds: PredictionSet = model.forward(scene.image, targets=scene, rng=rng)
    w = cfg.loss_weights()
    mode = effective_match_mode(cfg)
    totals, report = [], {}
    for key in preds.layer_keys():
        lp = preds.matching[key]
        assignment = match(lp.class_logits.data, lp.boxes.data,
                           lp.mask_logits.data, scene, w, rng, mode=mode,
                           decoupled_stuff=cfg.decoupled_stuff,
                           stuff_box_cost=cfg.stuff_box_cost,
                           n_points=cfg.points_per_pair)
        loss, rep = composite_loss(
            lp.class_logits, lp.boxes, lp.mask_logits, scene,
            assignment.pairs, w, rng, n_points=cfg.points_per_pair,
            decoupled_stuff=cfg.decoupled_stuff,
            use_box=cfg.use_box_task(), use_mask=cfg.use_mask_task())
        totals.append(loss)
        report[str(key)] = rep
    if preds.dn:
        for li in sorted(preds.dn):
            lp = preds.dn[li]
            loss, rep = dn_loss(lp.class_logits, lp.boxes, lp.mask_logits,
                                scene, preds.dn_groups, w, rng,
                                n_points=cfg.points_per_pair,
                                decoupled_stuff=cfg.decoupled_stuff,
                                use_box=cfg.use_box_task(),
                                use_mask=cfg.use_mask_task())
            totals.append(loss)
            report[f"dn{li}"] = rep
    total = totals[0]
    for t in totals[1:]:
        total = T.add(total, t)
    return total, report


def lr_at(cfg: RunConfig, step: int, total_steps: int) -> float:
    lr = cfg.lr
    for frac in cfg.milestones:
        if step >= int(frac * total_steps):
            lr *= cfg.lr_decay
    return lr


def train(cfg: RunConfig, scenes, out_dir, resume=None, log_name="loss_log.jsonl",
          on_step=None):
    """Train on (in-memory) scenes; returns (model, ckpt path, log path)."""
    cfg.validate()
    os.makedirs(out_dir, exist_ok=True)
    init_ss, train_ss = np.random.SeedSequence(cfg.seed).spawn(2)
    model = Model(cfg, np.random.default_rng(init_ss))
    opt = Adam(model.parameters(), lr=cfg.lr)
    train_rng = np.random.default_rng(train_ss)

    n = len(scenes)
    if n == 0:
        raise ValueError("empty dataset")
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    step = 0
    start_epoch = 0
    if resume is not None:
        ck = load_checkpoint(resume)
        params = model.parameters()
        for name, arr in ck.arrays.items():
            if name.startswith("param/"):
                p = params[name[len("param/"):]]
                p.data = arr.astype(p.data.dtype).reshape(p.data.shape)
        opt.load_state_arrays(ck.arrays, ck.step)
        train_rng.bit_generator.state = ck.rng_state
        step = ck.step
        start_epoch = step // steps_per_epoch

    log_path = os.path.join(out_dir, log_name)
    ckpt_path = os.path.join(out_dir, "model.ckpt")
    mode = "a" if resume is not None else "w"
    with open(log_path, mode, encoding="utf-8") as log:
        for epoch in range(start_epoch, cfg.epochs):
            order = train_rng.permutation(n)
            for b0 in range(0, n, cfg.batch_size):
                batch = order[b0:b0 + cfg.batch_size]
                totals, reports = [], []
                for idx in batch:
                    total_i, rep = scene_loss(model, scenes[int(idx)], cfg,
                                              train_rng)
                    totals.append(total_i)
                    reports.append(rep)
                batch_loss = totals[0]
                for t in totals[1:]:
                    batch_loss = T.add(batch_loss, t)
                batch_loss = T.div(batch_loss, float(len(totals)))
                value = batch_loss.item()
                if not np.isfinite(value):
                    raise TrainDiverged(
                        f"non-finite loss at step {step}",
                        {"step": step, "epoch": epoch,
                         "reports": reports})
                opt.zero_grad()
                T.backward(batch_loss)
                lr = lr_at(cfg, step, total_steps)
                opt.step(lr)
                step += 1
                record = {"step": step, "epoch": epoch, "lr": lr,
                          "total": value, "scenes": int(len(batch)),
                          "terms": _merge_reports(reports)}
                log.write(json.dumps(record, sort_keys=True) + "\n")
                if on_step is not None:
                    on_step(step, total_steps, value)
            save_checkpoint(ckpt_path, cfg, model, step,
                            train_rng.bit_generator.state,
                            extra=opt.state_arrays())
            log.flush()
    return model, ckpt_path, log_path


def _merge_reports(reports) -> dict:
    merged = {}
    keys = sorted({k for r in reports for k in r})
    for key in keys:
        have = [r[key] for r in reports if key in r]
        merged[key] = {term: float(np.mean([h[term] for h in have]))
                       for term in have[0]}
    return merged
