"""Phrase grounding recall@k and referring-expression metrics.

Detections and ground truth are keyed by ``(image_id, label)`` where the
label is a phrase or expression id.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from ..boxes import iou_matrix
from ..errors import AnnotationError, ConfigError
from .records import Detection, GroundTruthBox, Key, group_by_key, rank

IOU_HIT = 0.5
DEFAULT_THRESHOLDS = (0.5, 0.6, 0.7, 0.8)


def _merged(boxes: np.ndarray) -> np.ndarray:
    return np.concatenate([boxes[:, :2].min(axis=0), boxes[:, 2:].max(axis=0)])[None]


@dataclass
class RecallResult:
    recall: dict[int, float]
    n_phrases: int
    skipped_without_gt: int = 0
    skipped_keys: list = field(default_factory=list)


def recall_at_k(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], ks: Sequence[int] = (1, 5, 10),
                phrases: Iterable[Key] | None = None, protocol: str = "any") -> RecallResult:
    """Fraction of phrases with a hit among their top-k boxes.

    ``any``: a top-k box overlaps some ground-truth box of the phrase with IoU
    >= 0.5.  ``merged``: the ground-truth boxes are first merged into their
    enclosing box.  Phrases listed in ``phrases`` that have no ground truth are
    skipped and counted.
    """
    if protocol not in ("any", "merged"):
        raise ConfigError(f"unknown recall protocol {protocol!r}")
    det_groups = group_by_key(dets)
    gt_groups = group_by_key(gts)
    keys = list(gt_groups) if phrases is None else list(dict.fromkeys(phrases))
    skipped = [k for k in keys if k not in gt_groups]
    scored = [k for k in keys if k in gt_groups]
    hits = {k: 0 for k in ks}
    for key in scored:
        gt_boxes = np.array([g.box for g in gt_groups[key]], dtype=np.float64)
        if protocol == "merged":
            gt_boxes = _merged(gt_boxes)
        ranked = rank(det_groups.get(key, []))
        if not ranked:
            continue
        good = (iou_matrix([d.box for d in ranked], gt_boxes) >= IOU_HIT).any(axis=1)
        first = int(np.argmax(good)) if good.any() else math.inf
        for k in ks:
            hits[k] += first < k
    n = len(scored)
    recall = {k: (hits[k] / n if n else math.nan) for k in ks}
    return RecallResult(recall, n, len(skipped), skipped)


def rec_accuracy(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                 expressions: Iterable[Key] | None = None) -> float:
    """Share of expressions whose highest-scoring box has IoU >= 0.5 with the single target."""
    gt_groups = group_by_key(gts)
    det_groups = group_by_key(dets)
    keys = list(gt_groups) if expressions is None else list(dict.fromkeys(expressions))
    if not keys:
        return math.nan
    correct = 0
    for key in keys:
        targets = gt_groups.get(key, [])
        if len(targets) != 1:
            raise AnnotationError(f"expression {key} needs exactly one ground-truth box, has {len(targets)}")
        ranked = rank(det_groups.get(key, []))
        if ranked and iou_matrix([ranked[0].box], [targets[0].box])[0, 0] >= IOU_HIT:
            correct += 1
    return correct / len(keys)


def _perfect_match(kept: Sequence[Detection], targets: Sequence[GroundTruthBox]) -> bool:
    """Greedy score-ordered one-to-one matching leaves nothing unmatched on either side."""
    if len(kept) != len(targets):
        return False
    if not targets:
        return True
    ious = iou_matrix([d.box for d in kept], [g.box for g in targets])
    taken = np.zeros(len(targets), dtype=bool)
    for i in range(len(kept)):
        row = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] < IOU_HIT:
            return False
        taken[j] = True
    return True


@dataclass
class GRefResult:
    threshold: float
    precision_f1: float  # Pr@(F1=1, IoU>=0.5) over expressions with targets
    n_acc: float  # no-target accuracy
    n_targeted: int
    n_no_target: int


def grefcoco_metrics(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], expressions: Iterable[Key],
                     threshold: float) -> GRefResult:
    """Generalized-REC scores at one confidence threshold.

    ``expressions`` lists every expression key, including those with no
    target (no ground-truth boxes).
    """
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    gt_groups = group_by_key(gts)
    det_groups = group_by_key(dets)
    hits = targeted = empty_ok = no_target = 0
    for key in dict.fromkeys(expressions):
        kept = rank([d for d in det_groups.get(key, []) if d.score >= threshold])
        targets = gt_groups.get(key, [])
        if targets:
            targeted += 1
            hits += _perfect_match(kept, targets)
        else:
            no_target += 1
            empty_ok += not kept
    return GRefResult(threshold, hits / targeted if targeted else math.nan,
                      empty_ok / no_target if no_target else math.nan, targeted, no_target)


def threshold_sweep(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], expressions: Iterable[Key],
                    thresholds: Sequence[float] = DEFAULT_THRESHOLDS) -> dict[float, GRefResult]:
    thresholds = [float(t) for t in thresholds]
    if thresholds != sorted(thresholds):
        raise ConfigError(f"thresholds must be sorted ascending, got {thresholds}")
    keys = list(dict.fromkeys(expressions))
    return {t: grefcoco_metrics(dets, gts, keys, t) for t in thresholds}
