"""Boxes, IoU/GIoU kernels, and mask-to-box derivation.

Boxes are normalized (cx, cy, w, h) in the unit square. Scalar ops work on
``Box``; batched ops work on [N, 4] float arrays in the same layout. The
differentiable GIoU variant operates on corner tensors so box losses can
backprop through the prediction path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

MIN_EXTENT = 1e-4   # floor for sanitized box width/height


class EmptyMask(ValueError):
    """No pixel cleared the threshold; the caller keeps its previous box."""


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


def to_corners(b) -> np.ndarray:
    """(cx, cy, w, h) -> (x0, y0, x1, y1); works on Box or [..., 4] arrays."""
    a = b.as_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64)
    cx, cy, w, h = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def from_corners(c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64)
    x0, y0, x1, y1 = c[..., 0], c[..., 1], c[..., 2], c[..., 3]
    return np.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], axis=-1)


def sanitize(arr) -> np.ndarray:
    """Clamp corners into the unit square and floor extents at MIN_EXTENT."""
    c = to_corners(arr)
    c = np.clip(c, 0.0, 1.0)
    cx = (c[..., 0] + c[..., 2]) / 2
    cy = (c[..., 1] + c[..., 3]) / 2
    w = np.maximum(c[..., 2] - c[..., 0], MIN_EXTENT)
    h = np.maximum(c[..., 3] - c[..., 1], MIN_EXTENT)
    cx = np.clip(cx, MIN_EXTENT / 2, 1.0 - MIN_EXTENT / 2)
    cy = np.clip(cy, MIN_EXTENT / 2, 1.0 - MIN_EXTENT / 2)
    return np.stack([cx, cy, w, h], axis=-1)


def sanitize_box(b: Box) -> Box:
    return Box(*sanitize(b.as_array()))


def _corner_iou_parts(ca, cb):
    """Intersection, union, and enclosing-hull areas for corner arrays."""
    ix0 = np.maximum(ca[..., 0], cb[..., 0])
    iy0 = np.maximum(ca[..., 1], cb[..., 1])
    ix1 = np.minimum(ca[..., 2], cb[..., 2])
    iy1 = np.minimum(ca[..., 3], cb[..., 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (ca[..., 2] - ca[..., 0]) * (ca[..., 3] - ca[..., 1])
    area_b = (cb[..., 2] - cb[..., 0]) * (cb[..., 3] - cb[..., 1])
    union = area_a + area_b - inter
    hx0 = np.minimum(ca[..., 0], cb[..., 0])
    hy0 = np.minimum(ca[..., 1], cb[..., 1])
    hx1 = np.maximum(ca[..., 2], cb[..., 2])
    hy1 = np.maximum(ca[..., 3], cb[..., 3])
    hull = (hx1 - hx0) * (hy1 - hy0)
    return inter, union, hull


def iou(a, b) -> float:
    inter, union, _ = _corner_iou_parts(to_corners(a), to_corners(b))
    return float(inter / max(union, 1e-12))


def giou(a, b) -> float:
    """IoU minus the hull penalty; equals IoU when the hull is the union."""
    inter, union, hull = _corner_iou_parts(to_corners(a), to_corners(b))
    u = max(union, 1e-12)
    return float(inter / u - (hull - union) / max(hull, 1e-12))


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between [N, 4] and [M, 4] cxcywh arrays -> [N, M]."""
    ca = to_corners(np.asarray(a))[:, None, :]
    cb = to_corners(np.asarray(b))[None, :, :]
    inter, union, _ = _corner_iou_parts(ca, cb)
    return inter / np.maximum(union, 1e-12)


def giou_matrix(a, b) -> np.ndarray:
    ca = to_corners(np.asarray(a))[:, None, :]
    cb = to_corners(np.asarray(b))[None, :, :]
    inter, union, hull = _corner_iou_parts(ca, cb)
    return (inter / np.maximum(union, 1e-12)
            - (hull - union) / np.maximum(hull, 1e-12))


def pairwise_costs(pred, gt):
    """L1 and GIoU cost matrices between Q predictions and G targets.

    Returns ([Q, G] summed |coordinate difference| in cxcywh space,
    [Q, G] of 1 - giou). G may be zero; Q must not be.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    if pred.shape[0] == 0:
        raise ValueError("pairwise_costs needs at least one prediction")
    if gt.shape[0] == 0:
        return (np.zeros((pred.shape[0], 0)), np.zeros((pred.shape[0], 0)))
    l1 = np.abs(pred[:, None, :] - gt[None, :, :]).sum(axis=-1)
    return l1, 1.0 - giou_matrix(pred, gt)


def mask_to_box(mask, threshold: float = 0.5) -> Box:
    """Tightest box (pixel outer edges) around mask values >= threshold."""
    m = np.asarray(mask)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"mask_to_box expects a [H, W] mask, got {m.shape}")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    ys, xs = np.nonzero(m >= threshold)
    if ys.size == 0:
        raise EmptyMask("no pixel clears the threshold")
    h, w = m.shape
    x0, x1 = xs.min() / w, (xs.max() + 1) / w
    y0, y1 = ys.min() / h, (ys.max() + 1) / h
    return Box((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def rasterize_box(b, height: int, width: int) -> np.ndarray:
    """Boolean mask of pixels whose centers fall inside the box."""
    c = to_corners(b)
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    inside_y = (ys >= c[1]) & (ys < c[3])
    inside_x = (xs >= c[0]) & (xs < c[2])
    return inside_y[:, None] & inside_x[None, :]


# -- differentiable variants (corner tensors) ---------------------------------

# corner extraction is linear in cxcywh, so it is a single constant matmul
_CORNER_MAT = np.array([[1.0, 0.0, 1.0, 0.0],
                        [0.0, 1.0, 0.0, 1.0],
                        [-0.5, 0.0, 0.5, 0.0],
                        [0.0, -0.5, 0.0, 0.5]])


def corners_t(boxes: T.Tensor) -> T.Tensor:
    """cxcywh Tensor [N, 4] -> corner Tensor [N, 4]."""
    return T.matmul(boxes, T.tensor(_CORNER_MAT))


def giou_pairs_t(pred_corners: T.Tensor, gt_corners) -> T.Tensor:
    """Differentiable per-pair GIoU between aligned corner tensors [N, 4]."""
    gt = T.tensor(np.asarray(gt_corners)) if not isinstance(gt_corners, T.Tensor) \
        else gt_corners

    def col(t, i):
        return T.reshape(T.gather_rows(T.transpose(t, (1, 0)), [i]), (-1,))

    ax0, ay0, ax1, ay1 = (col(pred_corners, i) for i in range(4))
    bx0, by0, bx1, by1 = (col(gt, i) for i in range(4))
    iw = T.relu(T.sub(T.minimum(ax1, bx1), T.maximum(ax0, bx0)))
    ih = T.relu(T.sub(T.minimum(ay1, by1), T.maximum(ay0, by0)))
    inter = T.mul(iw, ih)
    area_a = T.mul(T.sub(ax1, ax0), T.sub(ay1, ay0))
    area_b = T.mul(T.sub(bx1, bx0), T.sub(by1, by0))
    union = T.sub(T.add(area_a, area_b), inter)
    hw = T.sub(T.maximum(ax1, bx1), T.minimum(ax0, bx0))
    hh = T.sub(T.maximum(ay1, by1), T.minimum(ay0, by0))
    hull = T.mul(hw, hh)
    return T.sub(T.div(inter, union), T.div(T.sub(hull, union), hull))
