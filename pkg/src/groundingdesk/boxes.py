"""Box conversions and overlap measures on plain numpy arrays.

Files store absolute xyxy pixels; the network works in normalized cxcywh.
"""

from __future__ import annotations

import numpy as np


def xyxy_to_cxcywh(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.stack([(b[..., 0] + b[..., 2]) / 2, (b[..., 1] + b[..., 3]) / 2,
                     b[..., 2] - b[..., 0], b[..., 3] - b[..., 1]], axis=-1)


def cxcywh_to_xyxy(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                     b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], axis=-1)


def normalize_xyxy(boxes, width: float, height: float) -> np.ndarray:
    """Absolute xyxy pixels -> normalized cxcywh."""
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4) / np.array([width, height, width, height])
    return xyxy_to_cxcywh(b)


def denormalize_cxcywh(boxes, width: float, height: float) -> np.ndarray:
    b = cxcywh_to_xyxy(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    return b * np.array([width, height, width, height])


def area(boxes) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    return np.clip(b[..., 2] - b[..., 0], 0, None) * np.clip(b[..., 3] - b[..., 1], 0, None)


def _inter_union(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    return inter, union


def iou_matrix(preds, gts) -> np.ndarray:
    """Pairwise IoU of xyxy boxes, [n_pred, n_gt]; empty unions give 0."""
    a = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    inter, union = _inter_union(a, b)
    return np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)


def giou_matrix(preds, gts) -> np.ndarray:
    """Pairwise generalized IoU of xyxy boxes, values in [-1, 1]."""
    a = np.asarray(preds, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    inter, union = _inter_union(a, b)
    iou = np.divide(inter, union, out=np.zeros_like(inter), where=union > 0)
    lt = np.minimum(a[:, None, :2], b[None, :, :2])
    rb = np.maximum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    enclosing = wh[..., 0] * wh[..., 1]
    # the enclosure always covers the union; rounding can make the difference a hair negative
    gap = np.maximum(enclosing - union, 0.0)
    slack = np.divide(gap, enclosing, out=np.zeros_like(inter), where=enclosing > 0)
    return iou - slack


def giou(a, b) -> float:
    """Generalized IoU of two cxcywh boxes."""
    return float(giou_matrix(cxcywh_to_xyxy(a), cxcywh_to_xyxy(b))[0, 0])
