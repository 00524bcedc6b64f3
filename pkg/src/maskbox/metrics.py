"""Self-contained evaluation: average precision, panoptic quality, mean IoU.

AP is the 101-point interpolated area under the precision-recall curve with
greedy score-descending matching (each ground truth used once per IoU
threshold), averaged over the IoU ladder .50:.05:.95 and over the classes
present in the ground truth. PQ matches segments of the same class at
IoU > 0.5 (provably unique) and decomposes as sum(IoU_TP) over
|TP| + |FP|/2 + |FN|/2, per class, then averages. Score ties break on the
lower prediction id so results never depend on input order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry as G

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))


class MapExtentMismatch(ValueError):
    pass


class LabelOutOfRange(ValueError):
    pass


def box_iou_single(a, b) -> float:
    return G.iou(a, b)


def mask_iou_single(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def average_precision(preds, gts, kind: str = "box",
                      thresholds=IOU_THRESHOLDS) -> dict:
    """COCO-style AP.

    ``preds``: per image, a list of {"class", "score", <kind>}; ``gts``: per
    image, a list of {"class", <kind>}. Returns mean AP over thresholds and
    classes present in the ground truth, AP at 0.5, and per-class values.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} pred images vs {len(gts)} gt images")
    iou_fn = box_iou_single if kind == "box" else mask_iou_single
    classes = sorted({g["class"] for img in gts for g in img})
    per_class = {}
    for cls in classes:
        aps = []
        for thr in thresholds:
            aps.append(_ap_single(preds, gts, cls, kind, iou_fn, thr))
        per_class[cls] = {"ap": float(np.mean(aps)), "ap50": aps[0]}
    if not per_class:
        return {"ap": 0.0, "ap50": 0.0, "per_class": {}}
    return {"ap": float(np.mean([v["ap"] for v in per_class.values()])),
            "ap50": float(np.mean([v["ap50"] for v in per_class.values()])),
            "per_class": per_class}


def _ap_single(preds, gts, cls, kind, iou_fn, thr) -> float:
    rows = []          # (score, image id, pred id, payload)
    n_gt = 0
    for img_i, (pi, gi) in enumerate(zip(preds, gts)):
        n_gt += sum(1 for g in gi if g["class"] == cls)
        for pred_i, p in enumerate(pi):
            if p["class"] == cls:
                rows.append((-p["score"], img_i, pred_i, p))
    if n_gt == 0:
        return 0.0
    rows.sort(key=lambda r: r[:3])          # ties -> lower image, lower id
    used = [set() for _ in gts]
    tp = np.zeros(len(rows))
    for k, (_, img_i, _, p) in enumerate(rows):
        cands = [(j, iou_fn(p[kind], g[kind]))
                 for j, g in enumerate(gts[img_i])
                 if g["class"] == cls and j not in used[img_i]]
        cands = [(j, v) for j, v in cands if v >= thr]
        if cands:
            j = max(cands, key=lambda c: (c[1], -c[0]))[0]
            used[img_i].add(j)
            tp[k] = 1.0
    cum_tp = np.cumsum(tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (np.arange(len(rows)) + 1)
    # 101-point interpolation with the running max from the right
    ap = 0.0
    for r in np.linspace(0, 1, 101):
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


@dataclass
class PQStat:
    """Per-class accumulator for panoptic quality across images."""
    iou_sum: dict = field(default_factory=dict)
    tp: dict = field(default_factory=dict)
    fp: dict = field(default_factory=dict)
    fn: dict = field(default_factory=dict)

    def _bump(self, table, cls, val=1.0):
        table[cls] = table.get(cls, 0.0) + val

    def add_image(self, pred_map, pred_table, gt_map, gt_table):
        pred_map = np.asarray(pred_map)
        gt_map = np.asarray(gt_map)
        if pred_map.shape != gt_map.shape:
            raise MapExtentMismatch(f"{pred_map.shape} vs {gt_map.shape}")
        pred_cls = {s["id"]: s["class"] for s in pred_table}
        gt_cls = {s["id"]: s["class"] for s in gt_table}
        areas_p = {sid: int((pred_map == sid).sum()) for sid in pred_cls}
        areas_g = {sid: int((gt_map == sid).sum()) for sid in gt_cls}
        # pairwise intersections via a combined label
        combo = gt_map.astype(np.int64) * (pred_map.max() + 2) + pred_map
        vals, counts = np.unique(combo, return_counts=True)
        inter = {}
        for v, c in zip(vals, counts):
            gid, pid = divmod(int(v), int(pred_map.max() + 2))
            if gid > 0 and pid > 0:
                inter[(gid, pid)] = int(c)
        matched_g, matched_p = set(), set()
        for (gid, pid), i in sorted(inter.items()):
            if gt_cls[gid] != pred_cls[pid]:
                continue
            union = areas_g[gid] + areas_p[pid] - i
            iou = i / union
            if iou > 0.5:
                assert gid not in matched_g and pid not in matched_p, \
                    "IoU > 0.5 same-class matches must be unique"
                matched_g.add(gid)
                matched_p.add(pid)
                self._bump(self.tp, gt_cls[gid])
                self._bump(self.iou_sum, gt_cls[gid], iou)
        for gid, cls in gt_cls.items():
            if gid not in matched_g:
                self._bump(self.fn, cls)
        for pid, cls in pred_cls.items():
            if pid not in matched_p:
                self._bump(self.fp, cls)

    def summarize(self, thing_classes) -> dict:
        classes = sorted(set(self.tp) | set(self.fp) | set(self.fn))
        per_class, by_kind = {}, {True: [], False: []}
        for cls in classes:
            tp = self.tp.get(cls, 0.0)
            denom = tp + 0.5 * self.fp.get(cls, 0.0) + 0.5 * self.fn.get(cls, 0.0)
            pq = self.iou_sum.get(cls, 0.0) / denom if denom else 0.0
            per_class[cls] = pq
            by_kind[cls in thing_classes].append(pq)
        overall = list(per_class.values())
        return {
            "pq": float(np.mean(overall)) if overall else 0.0,
            "pq_thing": float(np.mean(by_kind[True])) if by_kind[True] else 0.0,
            "pq_stuff": float(np.mean(by_kind[False])) if by_kind[False] else 0.0,
            "per_class": per_class,
            "tp": int(sum(self.tp.values())),
            "fp": int(sum(self.fp.values())),
            "fn": int(sum(self.fn.values())),
        }


def panoptic_quality(pred_maps, pred_tables, gt_maps, gt_tables,
                     thing_classes) -> dict:
    stat = PQStat()
    for pm, pt, gm, gt in zip(pred_maps, pred_tables, gt_maps, gt_tables):
        stat.add_image(pm, pt, gm, gt)
    return stat.summarize(set(thing_classes))


def mean_iou(pred_labels, gt_labels, num_classes: int) -> dict:
    """Per-class IoU over all pixels; classes absent everywhere are skipped."""
    inter = np.zeros(num_classes)
    union = np.zeros(num_classes)
    for pm, gm in zip(pred_labels, gt_labels):
        pm = np.asarray(pm)
        gm = np.asarray(gm)
        if pm.shape != gm.shape:
            raise MapExtentMismatch(f"{pm.shape} vs {gm.shape}")
        for arr in (pm, gm):
            if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
                raise LabelOutOfRange(
                    f"labels must be in [0, {num_classes})")
        for cls in range(num_classes):
            p = pm == cls
            g = gm == cls
            inter[cls] += np.logical_and(p, g).sum()
            union[cls] += np.logical_or(p, g).sum()
    present = union > 0
    per_class = {int(c): float(inter[c] / union[c])
                 for c in np.nonzero(present)[0]}
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return {"miou": miou, "per_class": per_class}


@dataclass
class EvalReport:
    task: str
    ap_box: float = None
    ap_box_50: float = None
    ap_mask: float = None
    ap_mask_50: float = None
    pq: float = None
    pq_thing: float = None
    pq_stuff: float = None
    miou: float = None
    per_class: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    num_images: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        return EvalReport(**json.loads(text))
