"""Turning token logits into per-phrase detections and scoring them per task protocol."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .boxes import denormalize_cxcywh
from .data.manifest import DatasetManifest
from .data.samples import GroundingSample
from .errors import ConfigError
from .metrics import (
    Description,
    Detection,
    EvalReport,
    GroundTruthBox,
    average_precision,
    base_novel_split_ap,
    d3_evaluate,
    grefcoco_metrics,
    lvis_style_ap,
    rec_accuracy,
    recall_at_k,
    threshold_sweep,
)
from .model.detector import GroundingDetector
from .runconfig import MetricConfig
from .text import TokenizedCaption, Vocabulary, assemble_ovd_caption, caption_for_sample, tokenize

MODES = ("ovd", "pg", "rec", "d3-concat", "d3-parallel")
MODE_TASKS = {"ovd": "OVD", "pg": "PG", "rec": "REC", "d3-concat": "OVD", "d3-parallel": "OVD"}


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def phrase_scores(logits: np.ndarray, caption: TokenizedCaption, reduction: str = "max") -> tuple[list[int], np.ndarray]:
    """[num_query, n_phrases] scores from token logits; max (or mean) of token probabilities."""
    probs = _sigmoid(np.asarray(logits, dtype=np.float64))
    ids, cols = [], []
    for g in caption.phrase_groups:
        tok = probs[:, list(g.token_indices)]
        cols.append(tok.max(axis=1) if reduction == "max" else tok.mean(axis=1))
        ids.append(g.phrase_id)
    if reduction not in ("max", "mean"):
        raise ConfigError(f"unknown phrase score reduction {reduction!r}")
    return ids, np.stack(cols, axis=1) if cols else np.zeros((probs.shape[0], 0))


def _abs_boxes(boxes_cxcywh: np.ndarray, sample: GroundingSample) -> np.ndarray:
    b = denormalize_cxcywh(boxes_cxcywh, sample.width, sample.height)
    return np.clip(b, 0.0, [sample.width, sample.height, sample.width, sample.height])


def _detections(sample, boxes, ids, scores, floor: float, argmax: bool) -> list[Detection]:
    out = []
    for q in range(boxes.shape[0]):
        x1, y1, x2, y2 = (float(v) for v in boxes[q])
        if not (x2 > x1 and y2 > y1):
            continue
        if argmax:
            picks = [int(np.argmax(scores[q]))] if scores.shape[1] else []
        else:
            picks = range(len(ids))
        for k in picks:
            s = float(scores[q, k])
            if s >= floor:
                out.append(Detection(sample.image_id, (x1, y1, x2, y2), s, ids[k]))
    return out


@dataclass
class Predictor:
    model: GroundingDetector
    vocab: Vocabulary
    metrics: MetricConfig
    max_len: int = 64

    def run(self, pixels: np.ndarray, text: str, spans) -> tuple[np.ndarray, list[int], np.ndarray]:
        caption = tokenize(text, self.vocab, self.max_len, spans)
        with ad.no_grad():
            final = self.model(pixels, caption).final
        ids, scores = phrase_scores(final.logits.data, caption, self.metrics.phrase_score)
        return final.boxes.data, ids, scores

    def detect(self, sample: GroundingSample, pixels: np.ndarray, mode: str, floor: float) -> list[Detection]:
        if mode in ("ovd", "d3-concat"):
            text, spans, _ = caption_for_sample(sample)
            boxes, ids, scores = self.run(pixels, text, spans)
            return _detections(sample, _abs_boxes(boxes, sample), ids, scores, floor, argmax=True)
        if mode == "d3-parallel":
            out = []
            for cat, name in enumerate(sample.categories):
                text, spans = assemble_ovd_caption([name])
                boxes, _, scores = self.run(pixels, text, [(cat, s, e) for _, s, e in spans])
                out.extend(_detections(sample, _abs_boxes(boxes, sample), [cat], scores, floor, argmax=False))
            return out
        text, spans, _ = caption_for_sample(sample)
        boxes, ids, scores = self.run(pixels, text, spans)
        return _detections(sample, _abs_boxes(boxes, sample), ids, scores, floor, argmax=False)


def ground_truth(samples: Sequence[GroundingSample]) -> list[GroundTruthBox]:
    out = []
    for s in samples:
        for inst in s.instances:
            label = inst.category_id if s.task == "OVD" else inst.phrase_id
            out.append(GroundTruthBox(s.image_id, tuple(inst.box), label))
    return out


def phrase_keys(samples: Sequence[GroundingSample]) -> list[tuple]:
    return [(s.image_id, p.id) for s in samples for p in s.phrases]


def run_inference(predictor: Predictor, samples: Sequence[GroundingSample], pixels: Sequence[np.ndarray], mode: str,
                  floor: float = 0.0, workers: int = 1) -> list[Detection]:
    """Detections for every sample, concatenated in sample order whatever ``workers`` is."""
    def one(pair):
        return predictor.detect(pair[0], pair[1], mode, floor)

    pairs = list(zip(samples, pixels))
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(one, pairs))
    else:
        parts = [one(p) for p in pairs]
    return [d for part in parts for d in part]


def check_mode(mode: str, manifest: DatasetManifest | None, samples: Sequence[GroundingSample]) -> None:
    if mode not in MODES:
        raise ConfigError(f"unknown eval mode {mode!r}; choose from {MODES}")
    want = MODE_TASKS[mode]
    tasks = {s.task for s in samples} | ({manifest.task} if manifest else set())
    if tasks and tasks != {want}:
        raise ConfigError(f"mode {mode!r} needs {want} data, got tasks {sorted(tasks)}")


def score(mode: str, dets: list[Detection], samples: Sequence[GroundingSample], metrics: MetricConfig,
          manifest: DatasetManifest | None = None, threshold: float | None = None,
          sweep: bool = False) -> EvalReport:
    """Protocol metrics for ``dets`` against the samples' ground truth."""
    gts = ground_truth(samples)
    report = EvalReport(mode)
    report.counts.update(images=len(samples), detections=len(dets), ground_truth=len(gts))
    if mode == "ovd":
        res = average_precision(dets, gts, max_dets=metrics.max_dets)
        report.metrics.update(mAP=res.mAP, AP50=res.ap_at(0.5), AP75=res.ap_at(0.75))
        report.partitions["per_category"] = {int(c): float(np.mean(v)) for c, v in sorted(res.per_category.items())}
        if manifest is not None and manifest.frequency_buckets:
            report.partitions["frequency"] = lvis_style_ap(dets, gts, manifest.bucket_ids(), max_dets=metrics.max_dets)
        if manifest is not None and (manifest.base or manifest.novel):
            base, novel = manifest.split_ids()
            report.partitions["base_novel"] = base_novel_split_ap(dets, gts, base, novel, max_dets=metrics.max_dets)
    elif mode == "pg":
        res = recall_at_k(dets, gts, metrics.recall_ks, phrase_keys(samples), metrics.flickr_protocol)
        report.metrics.update({f"R@{k}": v for k, v in res.recall.items()})
        report.counts["phrases"] = res.n_phrases
        report.counts["phrases_without_gt"] = res.skipped_without_gt
    elif mode == "rec":
        keys = phrase_keys(samples)
        if threshold is None and not sweep:
            report.metrics["accuracy"] = rec_accuracy(dets, gts, keys)
        else:
            table = threshold_sweep(dets, gts, keys, metrics.gref_thresholds) if sweep else \
                {threshold: grefcoco_metrics(dets, gts, keys, threshold)}
            report.partitions["gref"] = {f"{t:g}": {"Pr@F1=1": r.precision_f1, "N-acc": r.n_acc}
                                         for t, r in table.items()}
            first = next(iter(table.values()))
            report.metrics.update({"Pr@F1=1": first.precision_f1, "N-acc": first.n_acc})
            report.counts.update(targeted=first.n_targeted, no_target=first.n_no_target)
    else:
        names = samples[0].categories if samples else []
        absent = set(manifest.absence) if manifest is not None else set()
        descs = [Description(k, name not in absent, len(tokenize(name, Vocabulary.build([name])).tokens))
                 for k, name in enumerate(names)]
        d3 = d3_evaluate(dets, gts, descs, mode.split("-")[1], metrics.d3_buckets, max_dets=metrics.max_dets)
        report.metrics.update(d3.metrics)
        report.partitions.update(d3.partitions)
        report.counts.update(d3.counts)
    return report
