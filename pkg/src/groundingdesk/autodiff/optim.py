from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError
from .tensor import Tensor


@dataclass
class AdamWState:
    step: int = 0
    exp_avg: list[np.ndarray] = field(default_factory=list)
    exp_avg_sq: list[np.ndarray] = field(default_factory=list)


def adamw_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 1e-4,
    eps: float = 1e-8,
    state: AdamWState | None = None,
) -> AdamWState:
    """One decoupled-weight-decay Adam update, applied in place to ``params``.

    Missing gradients count as zeros.  Pass the returned state back in on the
    next call; a fresh state starts both moments at zero.
    """
    if lr <= 0:
        raise ConfigError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    if state is None:
        state = AdamWState()
    if not state.exp_avg:
        state.exp_avg = [np.zeros(p.shape) for p in params]
        state.exp_avg_sq = [np.zeros(p.shape) for p in params]
    state.step += 1
    bc1 = 1.0 - b1**state.step
    bc2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.exp_avg, state.exp_avg_sq):
        if g is None:
            g = np.zeros(p.shape)
        p.data *= 1.0 - lr * weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return state


class AdamW:
    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4, betas=(0.9, 0.999),
                 weight_decay: float = 1e-4, eps: float = 1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.weight_decay = weight_decay
        self.eps = eps
        self.state = AdamWState()

    def step(self) -> None:
        adamw_step(self.params, [p.grad for p in self.params], self.lr, self.betas,
                   self.weight_decay, self.eps, self.state)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None
