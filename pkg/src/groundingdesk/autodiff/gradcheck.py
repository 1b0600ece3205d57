"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward, no_grad

# Gradients smaller than this are compared on an absolute scale (tol * GRAD_FLOOR).
# Central differences with step 1e-5 carry ~1e-9 of rounding noise on losses of
# order 10, so a pure ratio is meaningless for gradients that are zero or tiny.
GRAD_FLOOR = 1e-4


def numerical_grad(fn: Callable[[], Tensor], param: Tensor, step: float = 1e-5,
                   indices=None) -> np.ndarray:
    """d fn() / d param by central differences, one coordinate at a time.

    ``fn`` is re-evaluated under :func:`no_grad`; ``param.data`` is perturbed in
    place and restored.  ``indices`` restricts the flat coordinates visited.
    """
    flat = param.data.reshape(-1)
    out = np.zeros(flat.size)
    coords = range(flat.size) if indices is None else indices
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = float(fn().data)
            flat[i] = orig - step
            lo = float(fn().data)
            flat[i] = orig
            out[i] = (hi - lo) / (2 * step)
    return out.reshape(param.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise.

    The floor keeps coordinates whose true gradient is ~0 from dividing
    rounding noise by zero.
    """
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    loss = fn()
    backward(loss)
    grads = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    for p in params:
        p.grad = None
    return grads


def check_gradients(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-5,
                    floor: float = GRAD_FLOOR) -> float:
    """Largest relative error between backprop and finite differences."""
    worst = 0.0
    for p, g in zip(params, analytic_grads(fn, params)):
        num = numerical_grad(fn, p, step)
        if g.size:
            worst = max(worst, float(relative_error(g, num, floor).max()))
    return worst
