"""COCO-style box AP and the category-partitioned variants built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from ..boxes import iou_matrix
from ..errors import AnnotationError, ConfigError, DataError, MetadataError
from .records import Detection, GroundTruthBox, rank

COCO_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
BUCKETS = ("rare", "common", "frequent")


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered true-positive flags."""
    if n_gt == 0:
        raise ValueError("AP is undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def match_image(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], thr: float) -> np.ndarray:
    """Greedy matching of score-ordered detections in one image.

    Each detection takes the unmatched ground truth of highest IoU >= ``thr``
    (lowest index on ties).  Returns per-detection TP flags.
    """
    tp = np.zeros(len(dets))
    if not dets or not gts:
        return tp
    ious = iou_matrix([d.box for d in dets], [g.box for g in gts])
    taken = np.zeros(len(gts), dtype=bool)
    for i in range(len(dets)):
        row = np.where(taken, -1.0, ious[i])
        j = int(np.argmax(row))
        if row[j] >= thr:
            taken[j] = True
            tp[i] = 1.0
    return tp


def category_ap(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], thresholds: Sequence[float],
                max_dets: int = 100) -> list[float]:
    """AP of one category at each IoU threshold; ``gts`` must be non-empty."""
    by_image: dict = {}
    for d in dets:
        by_image.setdefault(d.image_id, ([], []))[0].append(d)
    for g in gts:
        by_image.setdefault(g.image_id, ([], []))[1].append(g)
    order = sorted(by_image, key=lambda k: (str(type(k)), k))
    kept = [(img, rank(by_image[img][0])[:max_dets]) for img in order]
    scores = np.array([d.score for _, ds in kept for d in ds])
    # stable sort over images in order keeps ties deterministic
    perm = np.argsort(-scores, kind="stable")
    out = []
    for thr in thresholds:
        flags = np.concatenate([match_image(ds, by_image[img][1], thr) for img, ds in kept] or [np.zeros(0)])
        out.append(interpolated_ap(flags[perm], len(gts)))
    return out


@dataclass
class APResult:
    thresholds: tuple[float, ...]
    per_category: dict[int, list[float]]
    excluded: list[int] = field(default_factory=list)  # categories with detections but no ground truth

    @property
    def per_threshold(self) -> dict[float, float]:
        if not self.per_category:
            return {t: math.nan for t in self.thresholds}
        table = np.array(list(self.per_category.values()))
        return {t: float(v) for t, v in zip(self.thresholds, table.mean(axis=0))}

    @property
    def mAP(self) -> float:
        return self.mean_over(self.per_category)

    def category_mean(self, category: int) -> float:
        return float(np.mean(self.per_category[category]))

    def mean_over(self, categories: Iterable[int], threshold: float | None = None) -> float:
        cats = [c for c in categories if c in self.per_category]
        if not cats:
            return math.nan
        if threshold is None:
            return float(np.mean([self.category_mean(c) for c in cats]))
        k = self.thresholds.index(threshold)
        return float(np.mean([self.per_category[c][k] for c in cats]))

    def ap_at(self, threshold: float) -> float:
        return self.mean_over(self.per_category, threshold)


def average_precision(dets: Sequence[Detection], gts: Sequence[GroundTruthBox],
                      iou_thresholds: Sequence[float] = COCO_THRESHOLDS, max_dets: int = 100) -> APResult:
    """Per-category AP at each IoU threshold; mAP averages categories, then thresholds.

    Categories without ground truth are left out of every mean and listed in
    ``excluded`` when they have detections.
    """
    thresholds = tuple(float(t) for t in iou_thresholds)
    det_by_cat: dict = {}
    gt_by_cat: dict = {}
    for d in dets:
        det_by_cat.setdefault(d.label, []).append(d)
    for g in gts:
        gt_by_cat.setdefault(g.label, []).append(g)
    per_category = {c: category_ap(det_by_cat.get(c, []), gt_by_cat[c], thresholds, max_dets)
                    for c in sorted(gt_by_cat)}
    excluded = sorted(c for c in det_by_cat if c not in gt_by_cat)
    return APResult(thresholds, per_category, excluded)


def lvis_style_ap(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], category_buckets: Mapping[int, str],
                  iou_thresholds: Sequence[float] = COCO_THRESHOLDS, max_dets: int = 100) -> dict[str, float]:
    """AP plus APr / APc / APf averaged within frequency buckets."""
    for c in {d.label for d in dets} | {g.label for g in gts}:
        if c not in category_buckets:
            raise MetadataError(f"category {c} has no frequency bucket")
        if category_buckets[c] not in BUCKETS:
            raise MetadataError(f"category {c} has unknown bucket {category_buckets[c]!r}")
    res = average_precision(dets, gts, iou_thresholds, max_dets)
    out = {"AP": res.mAP}
    for bucket in BUCKETS:
        out["AP" + bucket[0]] = res.mean_over(c for c, b in category_buckets.items() if b == bucket)
    return out


def base_novel_split_ap(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], base_set: Iterable[int],
                        novel_set: Iterable[int], iou_thresholds: Sequence[float] = COCO_THRESHOLDS,
                        max_dets: int = 100) -> dict[str, float]:
    """mAP overall and restricted to base and novel categories, plus the same at IoU 0.5."""
    base, novel = set(base_set), set(novel_set)
    if base & novel:
        raise ConfigError(f"categories in both base and novel sets: {sorted(base & novel)}")
    seen = {d.label for d in dets} | {g.label for g in gts}
    if seen - base - novel:
        raise ConfigError(f"categories in neither partition: {sorted(seen - base - novel)}")
    thresholds = tuple(iou_thresholds)
    if 0.5 not in thresholds:
        thresholds = (0.5,) + thresholds
    res = average_precision(dets, gts, thresholds, max_dets)
    # restrict the headline numbers to the requested thresholds
    keep = [thresholds.index(t) for t in iou_thresholds]

    def mean_ap(cats) -> float:
        vals = [np.mean([res.per_category[c][k] for k in keep]) for c in cats if c in res.per_category]
        return float(np.mean(vals)) if vals else math.nan

    return {
        "mAP": mean_ap(res.per_category),
        "base": mean_ap(base),
        "novel": mean_ap(novel),
        "AP50": res.mean_over(res.per_category, 0.5),
        "base_AP50": res.mean_over(base, 0.5),
        "novel_AP50": res.mean_over(novel, 0.5),
    }


def macro_average(values: Sequence[float]) -> float:
    """Unweighted mean of per-dataset scores."""
    vals = [float(v) for v in values]
    if not vals:
        raise DataError("macro_average needs at least one value")
    return math.fsum(vals) / len(vals)


# -- described-object evaluation -------------------------------------------------------------

D3_MODES = ("concat", "parallel")
DEFAULT_LENGTH_BUCKETS = (("s", 0, 3), ("m", 4, 6), ("l", 7, 10), ("vl", 11, math.inf))


@dataclass(frozen=True)
class Description:
    id: int
    presence: bool | None  # True: presence description, False: absence
    n_tokens: int | None


def length_bucket(n_tokens: int, buckets=DEFAULT_LENGTH_BUCKETS) -> str:
    for name, lo, hi in buckets:
        if lo <= n_tokens <= hi:
            return name
    raise ConfigError(f"no length bucket covers {n_tokens} tokens")


def d3_evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruthBox], descriptions: Sequence[Description],
                mode: str = "concat", length_buckets=DEFAULT_LENGTH_BUCKETS,
                iou_thresholds: Sequence[float] = COCO_THRESHOLDS, max_dets: int = 100):
    """AP over descriptions, partitioned into FULL / PRES / ABS and length buckets.

    Detection labels are description ids.  ``mode`` only records how the
    detections were produced; scoring is identical for both.
    """
    from .report import EvalReport

    if mode not in D3_MODES:
        raise ConfigError(f"mode must be one of {D3_MODES}, got {mode!r}")
    for desc in descriptions:
        if desc.presence is None or desc.n_tokens is None:
            raise AnnotationError(f"description {desc.id} lacks a presence/absence tag or token length")
    known = {d.id for d in descriptions}
    stray = ({d.label for d in dets} | {g.label for g in gts}) - known
    if stray:
        raise AnnotationError(f"labels without a description record: {sorted(stray)[:5]}")
    res = average_precision(dets, gts, iou_thresholds, max_dets)
    parts = {
        "FULL": [d.id for d in descriptions],
        "PRES": [d.id for d in descriptions if d.presence],
        "ABS": [d.id for d in descriptions if not d.presence],
    }
    report = EvalReport(f"d3-{mode}")
    for name, ids in parts.items():
        report.metrics[name] = res.mean_over(ids)
    report.partitions["length"] = {
        name: res.mean_over(d.id for d in descriptions if length_bucket(d.n_tokens, length_buckets) == name)
        for name, _, _ in length_buckets
    }
    report.counts["descriptions_without_gt"] = sum(1 for d in descriptions if d.id not in res.per_category)
    return report
