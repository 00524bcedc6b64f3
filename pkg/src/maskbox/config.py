"""Run configuration: model size, loss weights, noise model, toggles, schedule.

Serialized as a flat ``key = value`` text file with ``#`` comments. Defaults
follow the established weights (cls/l1/giou/ce/dice = 4/5/2/5/5, flip
probability 0.2, noise bounds 0.4/0.4, lr drops at the 0.9 and 0.95
fractions of total steps); everything else is sized for minutes-scale CPU
training on 64x64 scenes.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigInvalid(ValueError):
    pass


@dataclass
class RunConfig:
    # model
    hidden: int = 64
    heads: int = 4
    enc_layers: int = 1
    dec_layers: int = 3
    num_queries: int = 20
    num_levels: int = 4
    image_size: int = 64
    token_cap: int = 4096
    sampling_points: int = 4
    ffn_mult: int = 2
    num_thing_classes: int = 3
    num_stuff_classes: int = 2
    # loss weights
    lambda_cls: float = 4.0
    lambda_l1: float = 5.0
    lambda_giou: float = 2.0
    lambda_ce: float = 5.0
    lambda_dice: float = 5.0
    points_per_pair: int = 128
    # denoising
    denoising: bool = True
    dn_groups: int = 3
    dn_p_flip: float = 0.2
    dn_lambda1: float = 0.4
    dn_lambda2: float = 0.4
    # feature toggles
    mask_enhanced_init: bool = True
    hybrid_matching_mode: str = "hybrid"     # hybrid | box | mask
    decoupled_stuff: bool = True
    stuff_box_cost: str = "grand_mean"       # grand_mean | row_mean
    tasks: str = "both"                      # both | box | mask
    share_enc_heads: bool = False
    # optimizer / schedule
    lr: float = 1e-3
    lr_decay: float = 0.1
    milestone_fracs: str = "0.9,0.95"
    epochs: int = 18
    batch_size: int = 4
    seed: int = 0
    # scene generation defaults (used by the data command)
    thing_min: int = 2
    thing_max: int = 4
    # post-processing
    score_threshold: float = 0.25
    min_segment_area: int = 16
    mask_threshold: float = 0.5

    @property
    def num_classes(self) -> int:
        return self.num_thing_classes + self.num_stuff_classes

    @property
    def milestones(self):
        return tuple(float(f) for f in self.milestone_fracs.split(","))

    def validate(self) -> "RunConfig":
        if self.hidden % self.heads:
            raise ConfigInvalid(f"hidden {self.hidden} not divisible by "
                                f"heads {self.heads}")
        if self.num_levels < 2:
            raise ConfigInvalid("need at least 2 pyramid levels")
        div = 4 * 2 ** (self.num_levels - 1)
        if self.image_size % div or self.image_size < div:
            raise ConfigInvalid(f"image size {self.image_size} must be a "
                                f"multiple of {div} for {self.num_levels} levels")
        if self.hybrid_matching_mode not in ("hybrid", "box", "mask"):
            raise ConfigInvalid(f"bad matching mode {self.hybrid_matching_mode}")
        if self.tasks not in ("both", "box", "mask"):
            raise ConfigInvalid(f"bad tasks {self.tasks}")
        if self.stuff_box_cost not in ("grand_mean", "row_mean"):
            raise ConfigInvalid(f"bad stuff_box_cost {self.stuff_box_cost}")
        if not 0 < self.mask_threshold < 1:
            raise ConfigInvalid("mask_threshold must be in (0, 1)")
        for f in self.milestones:
            if not 0 < f <= 1:
                raise ConfigInvalid(f"milestone fraction {f} out of (0, 1]")
        return self

    def loss_weights(self):
        from .losses import LossWeights
        return LossWeights(self.lambda_cls, self.lambda_l1, self.lambda_giou,
                           self.lambda_ce, self.lambda_dice)

    def dn_config(self):
        from .denoise import DenoiseConfig
        return DenoiseConfig(self.dn_p_flip, self.dn_lambda1,
                             self.dn_lambda2, self.dn_groups)

    def use_box_task(self) -> bool:
        return self.tasks in ("both", "box")

    def use_mask_task(self) -> bool:
        return self.tasks in ("both", "mask")

    def to_text(self) -> str:
        lines = ["# maskbox run configuration"]
        for f in dataclasses.fields(self):
            lines.append(f"{f.name} = {getattr(self, f.name)}")
        return "\n".join(lines) + "\n"


def micro_config() -> RunConfig:
    """The gradient-check model: small enough for finite differences."""
    return RunConfig(hidden=8, heads=2, enc_layers=1, dec_layers=2,
                     num_queries=4, num_levels=3, image_size=16,
                     sampling_points=2, points_per_pair=16, dn_groups=2,
                     epochs=1, batch_size=1)


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigInvalid(f"line {lineno}: expected 'key = value'")
        key, val = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigInvalid(f"line {lineno}: unknown key {key!r}")
        ftype = fields[key].type
        try:
            if ftype == "bool":
                if val.lower() not in ("true", "false"):
                    raise ValueError(val)
                parsed = val.lower() == "true"
            elif ftype == "int":
                parsed = int(val)
            elif ftype == "float":
                parsed = float(val)
            else:
                parsed = val
        except ValueError as exc:
            raise ConfigInvalid(f"line {lineno}: bad {ftype} value {val!r} "
                                f"for {key}") from exc
        setattr(cfg, key, parsed)
    return cfg.validate()


def load_config(path, base: RunConfig | None = None) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read(), base)
