"""Full-batch toy training: forward, total loss, backward, AdamW."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .boxes import normalize_xyxy
from .data.samples import GroundingSample
from .errors import NumericError
from .losses import GroundTruth, LossWeights, total_loss
from .model.detector import GroundingDetector
from .runconfig import OptimizerConfig
from .text import TokenizedCaption, Vocabulary, build_positive_map, caption_for_sample, tokenize

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("step", "total", "cls", "l1", "giou")


@dataclass
class Example:
    sample: GroundingSample
    pixels: np.ndarray
    caption: TokenizedCaption
    gt: GroundTruth


def prepare_example(sample: GroundingSample, pixels: np.ndarray, vocab: Vocabulary, max_len: int = 64) -> Example:
    """Prompt, positive map and normalized cxcywh targets for one sample.

    OVD prompts list every category of the dataset so that phrase ids equal
    category ids.
    """
    text, spans, inst_phrases = caption_for_sample(sample)
    caption = tokenize(text, vocab, max_len, spans)
    boxes = np.array([i.box for i in sample.instances], dtype=np.float64).reshape(-1, 4)
    target = normalize_xyxy(boxes, sample.width, sample.height)
    return Example(sample, np.asarray(pixels, dtype=np.float64), caption,
                   GroundTruth(target.reshape(-1, 4), build_positive_map(caption, inst_phrases)))


def build_vocabulary(samples: Sequence[GroundingSample]) -> Vocabulary:
    return Vocabulary.build(caption_for_sample(s)[0] for s in samples)


def batch_loss(model: GroundingDetector, examples: Sequence[Example], weights: LossWeights):
    """Mean total loss over the batch plus the averaged breakdown row."""
    total = None
    row = {"total": 0.0, "cls": 0.0, "l1": 0.0, "giou": 0.0}
    for ex in examples:
        lb = total_loss(model(ex.pixels, ex.caption), ex.gt, weights)
        total = lb.total if total is None else total + lb.total
        for k, v in lb.row().items():
            row[k] += v
    n = len(examples)
    return total * (1.0 / n), {k: v / n for k, v in row.items()}


@dataclass
class TrainResult:
    rows: list[dict]
    steps: int


def train(model: GroundingDetector, examples: Sequence[Example], weights: LossWeights, opt: OptimizerConfig,
          steps: int | None = None, loss_csv: str | Path | None = None,
          callback: Callable[[int, dict], bool] | None = None, log_every: int = 50) -> TrainResult:
    """Run ``steps`` optimizer updates (default ``opt.steps``).

    Row ``k`` of the loss curve is the loss before update ``k+1``.  ``callback``
    sees ``(steps_done, row)`` after every update and may return True to stop.
    A non-finite loss aborts with the step number and its breakdown.
    """
    steps = opt.steps if steps is None else steps
    params = model.parameters()
    optimizer = ad.AdamW(params, lr=opt.lr, betas=opt.betas, weight_decay=opt.weight_decay, eps=opt.eps)
    rows = []
    fh = open(loss_csv, "w", newline="", encoding="utf-8") if loss_csv else None
    try:
        writer = csv.writer(fh) if fh else None
        if writer:
            writer.writerow(LOSS_COLUMNS)
        done = 0
        for step in range(steps):
            optimizer.zero_grad()
            try:
                loss, row = batch_loss(model, examples, weights)
            except NumericError as exc:
                raise NumericError(f"step {step}: non-finite value in forward pass: {exc}") from exc
            if not all(np.isfinite(v) for v in row.values()):
                raise NumericError(f"step {step}: non-finite loss {row}")
            row = {"step": step, **row}
            rows.append(row)
            if writer:
                writer.writerow([step] + [repr(row[k]) for k in LOSS_COLUMNS[1:]])
            if log_every and step % log_every == 0:
                log.info("step %d total %.4f cls %.4f l1 %.4f giou %.4f", step, row["total"], row["cls"],
                         row["l1"], row["giou"])
            try:
                ad.backward(loss)
            except NumericError as exc:
                raise NumericError(f"step {step}: non-finite gradient (loss {row}): {exc}") from exc
            optimizer.step()
            done = step + 1
            if callback is not None and callback(done, row):
                break
    finally:
        if fh:
            fh.close()
    return TrainResult(rows, done)
