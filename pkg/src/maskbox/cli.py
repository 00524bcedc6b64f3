"""Command-line interface.

Subcommands: gen-data, train, eval, inspect, gradcheck. Every error path
exits nonzero with one machine-parsable line on stderr ("error: <reason>");
exit code 2 marks configuration/usage problems, 3 marks a diverged (NaN)
training run. MD_THREADS caps evaluation worker threads (default 1, which
also guarantees byte-identical runs).
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .checkpoint import FormatError as CkptFormatError
from .checkpoint import load_checkpoint, restore_model
from .config import ConfigInvalid, RunConfig, load_config, micro_config
from .evaluate import (SceneNotFound, dump_scene, evaluate_dataset,
                       inspect_scene)
from .scenes import (FormatError, InvariantViolation, IoFailure, SceneConfig,
                     generate_dataset, load_scenes, write_dataset)
from .train import TrainDiverged, train
from .verify import full_loss_gradcheck


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def cmd_gen_data(args) -> int:
    if args.image_size % 32:
        _err(f"image size {args.image_size} must be a multiple of 32")
        return 2
    lo, hi = args.thing_range
    try:
        cfg = SceneConfig(image_size=args.image_size, thing_min=lo,
                          thing_max=hi).validate()
        manifest = write_dataset(
            generate_dataset(cfg, args.num_scenes, args.seed), args.out)
    except (ConfigInvalid, ValueError) as exc:
        _err(str(exc))
        return 2
    except IoFailure as exc:
        _err(str(exc))
        return 1
    print(f"wrote {manifest['scene_count']} scenes to {args.out}")
    return 0


def _load_cfg(path) -> RunConfig:
    return load_config(path) if path else RunConfig().validate()


def cmd_train(args) -> int:
    try:
        cfg = _load_cfg(args.config)
        scenes = load_scenes(args.data)
    except (ConfigInvalid, FormatError, InvariantViolation,
            FileNotFoundError) as exc:
        _err(str(exc))
        return 2
    try:
        _, ckpt_path, log_path = train(cfg, scenes, args.out,
                                       resume=args.resume)
    except TrainDiverged as exc:
        os.makedirs(args.out, exist_ok=True)
        dump = os.path.join(args.out, "diverged.json")
        with open(dump, "w", encoding="utf-8") as fh:
            json.dump(exc.diagnostics, fh, indent=1, default=str)
        _err(f"{exc} (diagnostics in {dump})")
        return 3
    print(f"checkpoint: {ckpt_path}")
    print(f"loss log: {log_path}")
    return 0


def cmd_eval(args) -> int:
    if args.task not in ("instance", "panoptic", "semantic"):
        _err(f"unknown task {args.task!r} (instance|panoptic|semantic)")
        return 2
    try:
        ckpt = load_checkpoint(args.ckpt)
        model = restore_model(ckpt)
        scenes = load_scenes(args.data)
    except (CkptFormatError, FormatError, InvariantViolation,
            FileNotFoundError) as exc:
        _err(str(exc))
        return 2
    report = evaluate_dataset(model, scenes, ckpt.cfg, args.task)
    text = report.to_json()
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_inspect(args) -> int:
    try:
        ckpt = load_checkpoint(args.ckpt)
        model = restore_model(ckpt)
        scenes = load_scenes(args.data)
        if not 0 <= args.scene_id < len(scenes):
            raise SceneNotFound(f"scene {args.scene_id} not in dataset of "
                                f"{len(scenes)}")
    except (CkptFormatError, FormatError, InvariantViolation,
            FileNotFoundError, SceneNotFound) as exc:
        _err(str(exc))
        return 2
    scene = scenes[args.scene_id]
    report = inspect_scene(model, scene, ckpt.cfg)
    if args.dump:
        dump_scene(args.dump, scene, model.forward(scene.image).final,
                   ckpt.cfg)
    print(json.dumps(report, indent=1, sort_keys=True))
    return 0


def cmd_gradcheck(args) -> int:
    try:
        cfg = load_config(args.config, base=micro_config()) if args.config \
            else micro_config()
    except ConfigInvalid as exc:
        _err(str(exc))
        return 2
    report = full_loss_gradcheck(cfg, max_entries=args.entries)
    for name in sorted(report.per_param):
        print(f"{name}: worst_rel_err={report.per_param[name]:.3e}")
    print(f"excluded (kinks): {len(report.excluded)}")
    verdict = "PASS" if report.worst < 1e-4 else "FAIL"
    print(f"{verdict}: worst relative error {report.worst:.3e} "
          f"(threshold 1e-4)")
    return 0 if report.worst < 1e-4 else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="maskbox",
        description="Desk-scale unified box + mask set prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--num-scenes", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--thing-range", type=int, nargs=2, default=(2, 4),
                   metavar=("MIN", "MAX"))
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on a dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--report", default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inspect", help="per-layer report for one scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene-id", type=int, required=True)
    p.add_argument("--dump", default=None,
                   help="directory for PPM/PGM visualizations")
    p.set_defaults(fn=cmd_inspect)

    p = sub.add_parser("gradcheck",
                       help="finite-difference check of the full loss")
    p.add_argument("--config", default=None)
    p.add_argument("--entries", type=int, default=3,
                   help="checked entries per parameter tensor")
    p.set_defaults(fn=cmd_gradcheck)

    args = parser.parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
