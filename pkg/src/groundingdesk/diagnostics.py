"""Whole-detector gradient check against central finite differences."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import backward, no_grad
from .autodiff.gradcheck import GRAD_FLOOR, relative_error
from .losses import GroundTruth, LossWeights, set_loss, total_loss
from .model.detector import GroundingDetector
from .model.graph import Block, IncrementalRunner
from .text import TokenizedCaption


@dataclass
class GradCheckReport:
    n_parameters: int
    max_rel_error: float
    worst: str
    seconds: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    arrays: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)  # name -> (analytic, numeric)

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def jitter_parameters(model: GroundingDetector, scale: float = 0.1, seed: int = 0) -> None:
    """Move every parameter off its structured initial value.

    Zero-initialized projections make many gradients exactly zero at
    initialization, which would let a broken backward rule pass unnoticed.
    """
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.data += rng.normal(0.0, scale, p.shape)


def _loss_blocks(model: GroundingDetector, gt: GroundTruth, weights: LossWeights, matches) -> list[Block]:
    keys = [f"set.{i}" for i in range(len(model.decoder))] + ["set.enc"]
    out = []
    for key, match in zip(keys, matches):
        def term(pred, match=match):
            cls, l1, giou, _ = set_loss(pred, gt, weights, match)
            return (cls * weights.cls + l1 * weights.l1 + giou * weights.giou,)

        out.append(Block(f"loss.{key}", (), (key,), (f"loss.{key}",), term))
    return out


def detector_gradient_check(model: GroundingDetector, pixels: np.ndarray, caption: TokenizedCaption,
                            gt: GroundTruth, weights: LossWeights | None = None, step: float = 1e-5,
                            floor: float = GRAD_FLOOR, keep_arrays: bool = False) -> GradCheckReport:
    """Compare backprop gradients of the total loss with central differences for every parameter.

    Matches are computed once at the base point and held fixed during the
    finite differences, the same assignment the analytic gradient assumes.
    """
    weights = weights or LossWeights()
    start = time.perf_counter()
    params = dict(model.named_parameters())
    for p in params.values():
        p.grad = None
    breakdown = total_loss(model(pixels, caption), gt, weights)
    backward(breakdown.total)
    analytic = {name: (np.zeros(p.shape) if p.grad is None else p.grad.copy()) for name, p in params.items()}
    for p in params.values():
        p.grad = None

    with no_grad():
        blocks = model.blocks() + _loss_blocks(model, gt, weights, breakdown.matches)
        loss_keys = [b.writes[0] for b in blocks if b.name.startswith("loss.")]
        runner = IncrementalRunner(blocks, model.inputs(pixels, caption))

        def evaluate(p) -> float:
            values = runner.rerun(p)
            return math.fsum(float(values[k].data) for k in loss_keys)

        worst, worst_name, per_tensor, arrays = 0.0, "", {}, {}
        for name, p in params.items():
            flat = p.data.reshape(-1)
            num = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + step
                hi = evaluate(p)
                flat[i] = orig - step
                lo = evaluate(p)
                flat[i] = orig
                num[i] = (hi - lo) / (2 * step)
            err = float(relative_error(analytic[name].reshape(-1), num, floor).max())
            per_tensor[name] = err
            if keep_arrays:
                arrays[name] = (analytic[name], num.reshape(p.shape))
            if err > worst:
                worst, worst_name = err, name
    n = sum(p.size for p in params.values())
    return GradCheckReport(n, worst, worst_name, time.perf_counter() - start, per_tensor, arrays)
