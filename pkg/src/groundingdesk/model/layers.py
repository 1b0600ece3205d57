"""Parameterised building blocks: linear maps, norms, attention variants."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..errors import ConfigError


class Module:
    """Owns parameters and child modules; traversal follows attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Tensor) and item.requires_grad:
                        yield f"{full}.{i}", item

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()


def param(data: np.ndarray) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, zero: bool = False):
        bound = math.sqrt(6.0 / (d_in + d_out))
        w = np.zeros((d_in, d_out)) if zero else rng.uniform(-bound, bound, (d_in, d_out))
        self.weight = param(w)
        self.bias = param(np.zeros(d_out))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.linear(x, self.weight, self.bias)

    def zero_(self) -> None:
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = param(np.ones(d))
        self.beta = param(np.zeros(d))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class MLP(Module):
    def __init__(self, d_in: int, d_hidden: int, d_out: int, rng: np.random.Generator, n_layers: int = 2):
        dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = ad.gelu(x)
        return x

    @property
    def output(self) -> Linear:
        return self.layers[-1]


class FFN(Module):
    def __init__(self, d: int, d_ff: int, rng: np.random.Generator):
        self.fc1 = Linear(d, d_ff, rng)
        self.fc2 = Linear(d_ff, d, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.gelu(self.fc1(x)))

    @property
    def output(self) -> Linear:
        return self.fc2


class MultiHeadAttention(Module):
    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ConfigError(f"d_model {d} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.q_proj = Linear(d, d, rng)
        self.k_proj = Linear(d, d, rng)
        self.v_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def __call__(self, query: Tensor, key: Tensor, value: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``mask`` is additive, [n_query, n_key], broadcast over heads."""
        q, k, v = self.q_proj(query), self.k_proj(key), self.v_proj(value)
        return self.out_proj(ad.attention(q, k, v, self.n_heads, mask))

    @property
    def output(self) -> Linear:
        return self.out_proj


class BiAttention(Module):
    """Image<->text cross-attention sharing one attention-logit matrix.

    Image tokens read text values through a softmax over text tokens; text
    tokens read image values through a softmax over image tokens.
    """

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator):
        if d % n_heads:
            raise ConfigError(f"d_model {d} not divisible by n_heads {n_heads}")
        self.n_heads = n_heads
        self.img_q = Linear(d, d, rng)
        self.txt_k = Linear(d, d, rng)
        self.img_v = Linear(d, d, rng)
        self.txt_v = Linear(d, d, rng)
        self.img_out = Linear(d, d, rng)
        self.txt_out = Linear(d, d, rng)

    def __call__(self, img: Tensor, txt: Tensor) -> tuple[Tensor, Tensor]:
        n_img = img.shape[0]
        both = ad.bi_attention(self.img_q(img), self.txt_k(txt), self.img_v(img), self.txt_v(txt), self.n_heads)
        return self.img_out(both[:n_img]), self.txt_out(both[n_img:])


class DeformableAttention(Module):
    """Multi-scale deformable attention over a flattened feature pyramid.

    Each query samples ``n_points`` locations per head and level around its
    reference point and mixes them with softmax weights.  Offsets and weights
    start at zero, so sampling begins at the reference point with uniform
    weights.
    """

    def __init__(self, d: int, n_heads: int, n_levels: int, n_points: int, rng: np.random.Generator):
        if d % n_heads:
            raise ConfigError(f"d_model {d} not divisible by n_heads {n_heads}")
        self.n_heads, self.n_levels, self.n_points = n_heads, n_levels, n_points
        self.offsets = Linear(d, n_heads * n_levels * n_points * 2, rng, zero=True)
        self.weights = Linear(d, n_heads * n_levels * n_points, rng, zero=True)
        self.value_proj = Linear(d, d, rng)
        self.out_proj = Linear(d, d, rng)

    def __call__(self, query: Tensor, reference: Tensor | np.ndarray, value: Tensor,
                 spatial_shapes: list[tuple[int, int]]) -> Tensor:
        """``reference`` is normalized [nq, 2] points or [nq, 4] cxcywh boxes."""
        h, L, P = self.n_heads, self.n_levels, self.n_points
        nq = query.shape[0]
        d = value.shape[1]
        dh = d // h
        reference = ad.as_tensor(reference)
        v = self.value_proj(value).reshape(value.shape[0], h, dh)
        offsets = self.offsets(query).reshape(nq, h, L, P, 2)
        weights = ad.softmax(self.weights(query).reshape(nq, h, L * P), axis=-1).reshape(nq, h, L, P, 1)
        if reference.shape[1] == 2:
            # offsets are in units of the level's pixel size
            scale = 1.0 / np.array([[w, hh] for hh, w in spatial_shapes], dtype=np.float64)[:, None, :]
            loc = reference.reshape(nq, 1, 1, 1, 2) + offsets * scale
        else:
            half_wh = reference[:, 2:].reshape(nq, 1, 1, 1, 2) * (0.5 / P)
            loc = reference[:, :2].reshape(nq, 1, 1, 1, 2) + offsets * half_wh
        sampled = ad.sample_levels(v, spatial_shapes, loc)  # [nq, h, L, P, dh]
        out = (sampled * weights).sum(axis=(2, 3))
        return self.out_proj(out.reshape(nq, d))

    @property
    def output(self) -> Linear:
        return self.out_proj


def sine_embedding(coords: Tensor | np.ndarray, dims_per_coord: int, temperature: float = 10000.0) -> Tensor:
    """Sinusoidal embedding of normalized coordinates [n, k] -> [n, k * dims_per_coord]."""
    coords = ad.as_tensor(coords)
    n, k = coords.shape
    half = dims_per_coord // 2
    freqs = temperature ** (-np.arange(half) / max(half, 1)) * 2 * math.pi
    angles = coords.reshape(n, k, 1) * freqs  # [n, k, half]
    emb = ad.concat([ad.sin(angles), ad.cos(angles)], axis=-1)
    return emb.reshape(n, k * 2 * half)


def sequence_position_embedding(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d // 2)[None, :]
    angles = pos / (10000.0 ** (2 * i / d))
    out = np.zeros((length, d))
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out
