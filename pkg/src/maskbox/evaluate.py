"""Dataset evaluation and per-layer inspection.

Evaluation runs inference per scene (optionally on MD_THREADS workers; the
reduction is order-fixed by scene id either way), post-processes for the
requested task, and feeds the metrics module. Inspection re-matches each
supervised layer against the ground truth and reports mean box/mask IoU per
layer plus the decoder's layer-0 anchor quality, which is where
mask-enhanced initialization shows up.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import geometry as G
from . import scenes as S
from .config import RunConfig
from .matching import match
from .metrics import (EvalReport, average_precision, mask_iou_single,
                      mean_iou, panoptic_quality)
from .model import (Model, postprocess_instance, postprocess_panoptic,
                    postprocess_semantic)


class SceneNotFound(KeyError):
    pass


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("MD_THREADS", "1")))
    except ValueError:
        return 1


def run_inference(model: Model, scene_list):
    """Final-layer predictions per scene, in scene order."""
    def one(scene):
        return model.forward(scene.image).final

    w = _workers()
    if w == 1:
        return [one(s) for s in scene_list]
    with ThreadPoolExecutor(max_workers=w) as pool:
        return list(pool.map(one, scene_list))


def _instance_gt(scene) -> list:
    return [{"class": int(scene.classes[i]), "box": scene.boxes[i],
             "mask": scene.masks[i]}
            for i in range(scene.num_objects) if scene.is_thing[i]]


def evaluate_dataset(model: Model, scene_list, cfg: RunConfig,
                     task: str) -> EvalReport:
    if task not in ("instance", "panoptic", "semantic"):
        raise ValueError(f"unknown task {task!r}")
    finals = run_inference(model, scene_list)
    report = EvalReport(task=task, num_images=len(scene_list))
    if task == "instance":
        preds = [postprocess_instance(f, cfg.num_thing_classes,
                                      cfg.score_threshold, cfg.mask_threshold)
                 for f in finals]
        gts = [_instance_gt(s) for s in scene_list]
        box = average_precision(preds, gts, kind="box")
        mask = average_precision(preds, gts, kind="mask")
        report.ap_box, report.ap_box_50 = box["ap"], box["ap50"]
        report.ap_mask, report.ap_mask_50 = mask["ap"], mask["ap50"]
        report.per_class = {"box": box["per_class"], "mask": mask["per_class"]}
    elif task == "panoptic":
        pred_maps, pred_tables, gt_maps, gt_tables = [], [], [], []
        for f, s in zip(finals, scene_list):
            pm, pt = postprocess_panoptic(f, cfg.num_thing_classes,
                                          cfg.score_threshold,
                                          cfg.min_segment_area,
                                          cfg.mask_threshold)
            gm, gt = S.panoptic_map(s)
            pred_maps.append(pm)
            pred_tables.append(pt)
            gt_maps.append(gm)
            gt_tables.append(gt)
        pq = panoptic_quality(pred_maps, pred_tables, gt_maps, gt_tables,
                              thing_classes=set(range(cfg.num_thing_classes)))
        report.pq, report.pq_thing = pq["pq"], pq["pq_thing"]
        report.pq_stuff = pq["pq_stuff"]
        report.per_class = pq["per_class"]
        report.counts = {"tp": pq["tp"], "fp": pq["fp"], "fn": pq["fn"]}
    else:
        pred_labels = [postprocess_semantic(f) for f in finals]
        gt_labels = [S.semantic_map(s) for s in scene_list]
        mi = mean_iou(pred_labels, gt_labels, cfg.num_classes)
        report.miou = mi["miou"]
        report.per_class = mi["per_class"]
    return report


def evaluate_all(model: Model, scene_list, cfg: RunConfig) -> dict:
    """Instance + panoptic + semantic in one pass; keyed by task."""
    return {task: evaluate_dataset(model, scene_list, cfg, task)
            for task in ("instance", "panoptic", "semantic")}


# -- per-layer inspection --------------------------------------------------------

def _matched_ious(lp, scene, cfg, rng):
    w = cfg.loss_weights()
    assignment = match(lp.class_logits.data, lp.boxes.data,
                       lp.mask_logits.data, scene, w, rng,
                       mode=cfg.hybrid_matching_mode,
                       decoupled_stuff=cfg.decoupled_stuff,
                       n_points=cfg.points_per_pair)
    rows = []
    for t, q in assignment.pairs:
        biou = G.iou(lp.boxes.data[q].astype(np.float64), scene.boxes[t])
        miou = mask_iou_single(lp.mask_logits.data[q] >= 0.0, scene.masks[t])
        rows.append({"target": int(t), "query": int(q),
                     "box_iou": float(biou), "mask_iou": float(miou)})
    return assignment, rows


def inspect_scene(model: Model, scene, cfg: RunConfig,
                  rng_seed: int = 0) -> dict:
    """Per-layer report: matched box/mask IoU plus layer-0 anchor IoU."""
    preds = model.forward(scene.image)
    report = {"layers": {}}
    enc_assignment = None
    for key in preds.layer_keys():
        rng = np.random.default_rng(rng_seed)
        lp = preds.matching[key]
        assignment, rows = _matched_ious(lp, scene, cfg, rng)
        if key == "enc":
            enc_assignment = assignment
        scores = _score_table(lp)
        report["layers"][str(key)] = {
            "mean_box_iou": float(np.mean([r["box_iou"] for r in rows]))
            if rows else 0.0,
            "mean_mask_iou": float(np.mean([r["mask_iou"] for r in rows]))
            if rows else 0.0,
            "pairs": rows,
            "queries": scores,
        }
    # anchors entering decoder layer 0 vs the encoder-level assignment
    if 0 in preds.matching and enc_assignment is not None:
        anchors = preds.matching[0].anchors_in
        vals = [G.iou(anchors[q], scene.boxes[t])
                for t, q in enc_assignment.pairs]
        report["anchor_iou"] = float(np.mean(vals)) if vals else 0.0
    return report


def _score_table(lp) -> list:
    probs = 1.0 / (1.0 + np.exp(-lp.class_logits.data.astype(np.float64)))
    return [{"query": q, "class": int(probs[q].argmax()),
             "score": float(probs[q].max())}
            for q in range(probs.shape[0])]


def mean_anchor_iou(model: Model, scene_list, cfg: RunConfig) -> float:
    """Dataset-mean layer-0 anchor IoU (the ME-initialization readout)."""
    vals = []
    for scene in scene_list:
        rep = inspect_scene(model, scene, cfg)
        if "anchor_iou" in rep:
            vals.append(rep["anchor_iou"])
    return float(np.mean(vals)) if vals else 0.0


# -- portable pixmap dumps -------------------------------------------------------

def write_ppm(path, rgb: np.ndarray):
    """rgb is [H, W, 3] in [0, 1]."""
    arr = np.clip(np.asarray(rgb) * 255.0, 0, 255).astype(np.uint8)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def write_pgm(path, gray: np.ndarray):
    arr = np.clip(np.asarray(gray) * 255.0, 0, 255).astype(np.uint8)
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(arr.tobytes())


def dump_scene(out_dir, scene, final_preds, cfg: RunConfig):
    """Stride-4 visualizations: input, per-query masks, box overlay."""
    os.makedirs(out_dir, exist_ok=True)
    m = scene.masks[0].shape[0] if scene.masks else scene.image.shape[1] // 4
    small = scene.image[:, ::4, ::4].transpose(1, 2, 0)
    write_ppm(os.path.join(out_dir, "image.ppm"), small)
    probs = 1.0 / (1.0 + np.exp(-final_preds.mask_logits.data))
    overlay = small.copy()
    for q in range(probs.shape[0]):
        write_pgm(os.path.join(out_dir, f"mask_q{q:02d}.pgm"), probs[q])
        box = final_preds.boxes.data[q].astype(np.float64)
        c = G.to_corners(box)
        x0, y0 = int(c[0] * m), int(c[1] * m)
        x1, y1 = min(int(c[2] * m), m - 1), min(int(c[3] * m), m - 1)
        color = np.array([1.0, 0.2, 0.2])
        overlay[y0, x0:x1 + 1] = color
        overlay[y1, x0:x1 + 1] = color
        overlay[y0:y1 + 1, x0] = color
        overlay[y0:y1 + 1, x1] = color
    write_ppm(os.path.join(out_dir, "boxes.ppm"), overlay)
