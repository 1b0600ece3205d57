"""Token-level focal classification plus L1/GIoU box regression with Hungarian matching."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .boxes import cxcywh_to_xyxy, giou_matrix
from .errors import ConfigError, ShapeError
from .matching import MatchResult, hungarian_match
from .model.detector import Prediction, SetPrediction


@dataclass
class LossWeights:
    cls: float = 2.0
    l1: float = 5.0
    giou: float = 2.0
    alpha: float = 0.25
    gamma: float = 2.0
    normalization: str = "matched"  # or "gt"

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0 or self.gamma < 0:
            raise ConfigError("focal alpha must be in (0, 1) and gamma >= 0")
        if self.normalization not in ("matched", "gt"):
            raise ConfigError(f"unknown loss normalization {self.normalization!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GroundTruth:
    boxes: np.ndarray  # [n_gt, 4] normalized cxcywh
    positive_map: np.ndarray  # [n_gt, n_tokens]

    @property
    def n(self) -> int:
        return self.boxes.shape[0]


@dataclass
class LossBreakdown:
    cls: float
    l1: float
    giou: float
    per_layer: list[dict[str, float]]
    total: Tensor
    matches: list[MatchResult] = field(default_factory=list)

    def row(self) -> dict[str, float]:
        return {"total": float(self.total.data), "cls": self.cls, "l1": self.l1, "giou": self.giou}


# -- elementwise pieces ---------------------------------------------------------------

def _log_sigmoid(x: np.ndarray) -> np.ndarray:
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def focal_terms(logits: np.ndarray, alpha: float, gamma: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-cell focal loss if the target were 1 (pos) or 0 (neg)."""
    p = np.exp(_log_sigmoid(logits))
    pos = alpha * (1.0 - p) ** gamma * -_log_sigmoid(logits)
    neg = (1.0 - alpha) * p**gamma * -_log_sigmoid(-logits)
    return pos, neg


def sigmoid_focal_loss(logits: Tensor, targets: np.ndarray, alpha: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Elementwise binary focal loss on logits; ``targets`` is a {0,1} array."""
    x = logits.data
    t = np.asarray(targets, dtype=np.float64)
    log_p, log_q = _log_sigmoid(x), _log_sigmoid(-x)
    p = np.exp(log_p)
    q = 1.0 - p
    pos_mod, neg_mod = q**gamma, p**gamma
    out = t * (-alpha * pos_mod * log_p) + (1.0 - t) * (-(1.0 - alpha) * neg_mod * log_q)

    def back(g):
        d_pos = alpha * pos_mod * (gamma * p * log_p - q)
        d_neg = (1.0 - alpha) * neg_mod * (p - gamma * q * log_q)
        return (g * (t * d_pos + (1.0 - t) * d_neg),)

    return ad.custom_op(out, (logits,), back)


def focal_contrastive_loss(token_logits: Tensor, positive_map: np.ndarray, match: MatchResult,
                           alpha: float = 0.25, gamma: float = 2.0, normalizer: float | None = None) -> Tensor:
    """Focal loss over every (query, token) cell.

    Matched queries take their ground truth's positive-map row as target,
    every other query an all-zero row.  Normalized by the matched count.
    """
    targets = np.zeros(token_logits.shape)
    if len(match):
        targets[match.query_indices] = positive_map[match.gt_indices]
    denom = normalizer if normalizer is not None else max(len(match), 1)
    return sigmoid_focal_loss(token_logits, targets, alpha, gamma).sum() * (1.0 / denom)


def giou_loss_terms(pred_cxcywh: Tensor, gt_cxcywh: np.ndarray) -> Tensor:
    """1 - GIoU for aligned rows of predicted and target cxcywh boxes, shape [n]."""
    b = pred_cxcywh.data
    p1 = b[:, :2] - b[:, 2:] / 2  # (x1, y1)
    p2 = b[:, :2] + b[:, 2:] / 2
    g = cxcywh_to_xyxy(gt_cxcywh)
    g1, g2 = g[:, :2], g[:, 2:]
    # ties resolve towards the prediction, as elementwise min/max do
    in_hi = p2 <= g2
    in_lo = p1 >= g1
    side = np.where(in_hi, p2, g2) - np.where(in_lo, p1, g1)
    overlap = side > 0
    side = side * overlap
    inter = side[:, 0] * side[:, 1]
    area_p = b[:, 2] * b[:, 3]
    union = area_p + (g2[:, 0] - g1[:, 0]) * (g2[:, 1] - g1[:, 1]) - inter
    out_hi = p2 >= g2
    out_lo = p1 <= g1
    span = np.where(out_hi, p2, g2) - np.where(out_lo, p1, g1)
    enclosing = span[:, 0] * span[:, 1]
    loss = 2.0 - inter / union - union / enclosing

    def back(grad):
        d_inter = -(1.0 / union + inter / union**2) + 1.0 / enclosing
        d_union = inter / union**2 - 1.0 / enclosing  # via the predicted area
        d_enc = union / enclosing**2
        d_side = (d_inter * grad)[:, None] * side[:, ::-1] * overlap
        d_span = (d_enc * grad)[:, None] * span[:, ::-1]
        d_p2 = d_side * in_hi + d_span * out_hi
        d_p1 = -d_side * in_lo - d_span * out_lo
        d_area = d_union * grad
        out = np.empty_like(b)
        out[:, :2] = d_p1 + d_p2
        out[:, 2:] = (d_p2 - d_p1) / 2
        out[:, 2] += d_area * b[:, 3]
        out[:, 3] += d_area * b[:, 2]
        return (out,)

    return ad.custom_op(loss, (pred_cxcywh,), back)


# -- matching -------------------------------------------------------------------------------

def match_cost(pred: SetPrediction, gt: GroundTruth, weights: LossWeights) -> np.ndarray:
    """[num_query, n_gt] matching cost mirroring the loss terms."""
    logits = pred.logits.data
    boxes = pred.boxes.data
    pos, neg = focal_terms(logits, weights.alpha, weights.gamma)
    pm = gt.positive_map
    cls = (pos - neg) @ pm.T / np.maximum(pm.sum(axis=1), 1.0)[None, :]
    l1 = np.abs(boxes[:, None, :] - gt.boxes[None, :, :]).sum(axis=-1)
    giou = giou_matrix(cxcywh_to_xyxy(boxes), cxcywh_to_xyxy(gt.boxes))
    return weights.cls * cls + weights.l1 * l1 + weights.giou * (1.0 - giou)


def set_loss(pred: SetPrediction, gt: GroundTruth, weights: LossWeights, match: MatchResult | None = None
             ) -> tuple[Tensor, Tensor, Tensor, MatchResult]:
    if match is None:
        match = hungarian_match(match_cost(pred, gt, weights)) if gt.n else MatchResult([], 0.0)
    if weights.normalization == "gt":
        denom = float(max(gt.n, 1))
    else:
        denom = float(max(len(match), 1))
    cls = focal_contrastive_loss(pred.logits, gt.positive_map, match, weights.alpha, weights.gamma, denom)
    if len(match):
        q, g = match.query_indices, match.gt_indices
        matched = pred.boxes[q]
        target = gt.boxes[g]
        l1 = ad.abs_(matched - target).sum() * (1.0 / denom)
        giou = giou_loss_terms(matched, target).sum() * (1.0 / denom)
    else:
        l1 = Tensor(0.0)
        giou = Tensor(0.0)
    return cls, l1, giou, match


def total_loss(prediction: Prediction, gt: GroundTruth, weights: LossWeights | None = None,
               matches: list[MatchResult] | None = None) -> LossBreakdown:
    """Sum of the weighted loss over every decoder layer and the encoder output.

    Each supervision set is matched independently unless ``matches`` supplies
    precomputed assignments (one per set).
    """
    weights = weights or LossWeights()
    sets = prediction.supervision_sets
    if matches is not None and len(matches) != len(sets):
        raise ShapeError(f"expected {len(sets)} matches, got {len(matches)}")
    total = None
    per_layer, used = [], []
    sums = {"cls": 0.0, "l1": 0.0, "giou": 0.0}
    for k, pred in enumerate(sets):
        cls, l1, giou, match = set_loss(pred, gt, weights, None if matches is None else matches[k])
        term = cls * weights.cls + l1 * weights.l1 + giou * weights.giou
        total = term if total is None else total + term
        row = {"cls": float(cls.data), "l1": float(l1.data), "giou": float(giou.data)}
        per_layer.append(row)
        used.append(match)
        for key in sums:
            sums[key] += row[key]
    return LossBreakdown(sums["cls"], sums["l1"], sums["giou"], per_layer, total, used)
