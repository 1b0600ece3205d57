"""Dense float64 tensor with reverse-mode automatic differentiation.

Every op builds its output through :func:`_result`, which records the parent
tensors and a closure mapping the upstream gradient onto one gradient per
parent.  :func:`backward` orders the recorded graph topologically into a
:class:`Tape` and replays the closures in reverse.
"""

from __future__ import annotations

import contextlib
import math
import contextvars
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np

from ..errors import ConfigError, NumericError, ShapeError

_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run ops without recording them (inference, finite differences)."""
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        if type(data) is not np.ndarray or data.dtype != np.float64:
            data = np.asarray(data, dtype=np.float64)
        self.data: np.ndarray = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self) -> "Tensor":
        return transpose(self, None)


def _not_scalar(shape):
    raise ShapeError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn, check: bool = True) -> Tensor:
    # ``check=False`` is for ops that cannot turn finite inputs into non-finite outputs
    if check and not math.isfinite(np.add.reduce(data, axis=None)):
        raise NumericError(f"non-finite values produced by {getattr(backward, '__qualname__', 'op')}")
    out = Tensor(data)
    if _GRAD_ENABLED.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _result(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def back(g):
        gb = g / b.data
        return _unbroadcast(gb, a.shape), _unbroadcast(-gb * out, b.shape)

    return _result(out, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), False)


def power(a: Tensor, exponent: float) -> Tensor:
    def back(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _result(a.data**exponent, (a,), back)


def maximum(a, b) -> Tensor:
    """Elementwise max; ties send the gradient to ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data >= b.data

    def back(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.where(pick_a, a.data, b.data), (a, b), back, False)


def minimum(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def back(g):
        return _unbroadcast(g * pick_a, a.shape), _unbroadcast(g * ~pick_a, b.shape)

    return _result(np.where(pick_a, a.data, b.data), (a, b), back, False)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), False)


# -- unary functions --------------------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,))


def sin(a: Tensor) -> Tensor:
    return _result(np.sin(a.data), (a,), lambda g: (g * np.cos(a.data),), False)


def cos(a: Tensor) -> Tensor:
    return _result(np.cos(a.data), (a,), lambda g: (-g * np.sin(a.data),), False)


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def abs_(a: Tensor) -> Tensor:
    return _result(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), False)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,), False)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), False)


def log_sigmoid(a: Tensor) -> Tensor:
    """log(sigmoid(x)) evaluated without forming sigmoid(x)."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * (1.0 - _sigmoid(x)),), False)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), False)


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """tanh-approximated GELU (smooth everywhere, which keeps grad checks clean)."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _result(out, (a,), back)


def inverse_sigmoid(a: Tensor, eps: float = 1e-5) -> Tensor:
    x = clip(a, eps, 1.0 - eps)
    return log(x) - log(1.0 - x)


# -- reductions --------------------------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def back(g):
        return (_expand_reduced(g, shape, axis, keepdims),)

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    count = a.size if axis is None else int(np.prod([shape[ax] for ax in np.atleast_1d(axis)]))

    def back(g):
        return (_expand_reduced(g, shape, axis, keepdims) / count,)

    return _result(np.asarray(a.data.mean(axis=axis, keepdims=keepdims)), (a,), back)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (a,), back, False)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the affine ``gamma``/``beta``."""
    if eps <= 0:
        raise ConfigError("layer_norm eps must be positive")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm affine shapes {gamma.shape}/{beta.shape} do not match extent {d}")
    inv_d = 1.0 / d
    xc = x.data - x.data.sum(axis=-1, keepdims=True) * inv_d
    var = (xc * xc).sum(axis=-1, keepdims=True) * inv_d
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        gxhat = g * gamma.data
        gx = inv * (gxhat - gxhat.sum(axis=-1, keepdims=True) * inv_d
                    - xhat * ((gxhat * xhat).sum(axis=-1, keepdims=True) * inv_d))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gamma, beta), back)


# -- linear algebra and shape -------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}") from exc

    def back(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result(out, (a, b), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis of ``x`` as one op."""
    x = as_tensor(x)
    d_in, d_out = weight.shape
    if x.shape[-1] != d_in:
        raise ShapeError(f"linear dimension mismatch: {x.shape} @ {weight.shape}")
    x2 = x.data.reshape(-1, d_in)
    out = x2 @ weight.data
    if bias is not None:
        out = out + bias.data
    lead = x.shape[:-1]

    def back(g):
        g2 = g.reshape(-1, d_out)
        grads = ((g2 @ weight.data.T).reshape(x.shape), x2.T @ g2)
        return grads + (g2.sum(axis=0),) if bias is not None else grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out.reshape(*lead, d_out), parents, back)


def _heads(x: np.ndarray, h: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, h, d // h).transpose(1, 0, 2)


def _merge(x: np.ndarray) -> np.ndarray:
    h, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dh)


def _softmax_last(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_back(a: np.ndarray, ga: np.ndarray) -> np.ndarray:
    return a * (ga - (ga * a).sum(axis=-1, keepdims=True))


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on projected [n, d] inputs.

    Heads split the feature axis evenly; ``mask`` is additive [n_q, n_k].
    Returns the merged head outputs [n_q, d].
    """
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2 or q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes q {q.shape}, k {k.shape}, v {v.shape} are inconsistent")
    h = n_heads
    Q, K, V = _heads(q.data, h), _heads(k.data, h), _heads(v.data, h)
    scale = 1.0 / math.sqrt(Q.shape[-1])
    logits = (Q @ K.transpose(0, 2, 1)) * scale
    if mask is not None:
        if np.shape(mask) != (q.shape[0], k.shape[0]):
            raise ShapeError(f"attention mask {np.shape(mask)} does not match [{q.shape[0]}, {k.shape[0]}]")
        logits = logits + mask
    A = _softmax_last(logits)
    out = _merge(A @ V)

    def back(g):
        G = _heads(g, h)
        gS = _softmax_back(A, G @ V.transpose(0, 2, 1)) * scale
        return _merge(gS @ K), _merge(gS.transpose(0, 2, 1) @ Q), _merge(A.transpose(0, 2, 1) @ G)

    return _result(out, (q, k, v), back)


def bi_attention(q_img: Tensor, k_txt: Tensor, v_img: Tensor, v_txt: Tensor, n_heads: int) -> Tensor:
    """Two-way attention sharing one logit matrix between image and text tokens.

    Image tokens attend over text (softmax across text tokens, reading
    ``v_txt``); text tokens attend over image (softmax across image tokens,
    reading ``v_img``).  Returns the image rows stacked above the text rows,
    [n_img + n_txt, d].
    """
    h = n_heads
    Q, K = _heads(q_img.data, h), _heads(k_txt.data, h)
    Vi, Vt = _heads(v_img.data, h), _heads(v_txt.data, h)
    scale = 1.0 / math.sqrt(Q.shape[-1])
    logits = (Q @ K.transpose(0, 2, 1)) * scale  # [h, n_img, n_txt]
    A_img = _softmax_last(logits)
    A_txt = _softmax_last(logits.transpose(0, 2, 1))  # [h, n_txt, n_img]
    n_img = Q.shape[1]
    out = np.concatenate([_merge(A_img @ Vt), _merge(A_txt @ Vi)], axis=0)

    def back(g):
        Gi, Gt = _heads(g[:n_img], h), _heads(g[n_img:], h)
        gS = _softmax_back(A_img, Gi @ Vt.transpose(0, 2, 1))
        gS = (gS + _softmax_back(A_txt, Gt @ Vi.transpose(0, 2, 1)).transpose(0, 2, 1)) * scale
        return (_merge(gS @ K), _merge(gS.transpose(0, 2, 1) @ Q),
                _merge(A_txt.transpose(0, 2, 1) @ Gt), _merge(A_img.transpose(0, 2, 1) @ Gi))

    return _result(out, (q_img, k_txt, v_img, v_txt), back)


def custom_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap a forward value and its backward rule as a graph node.

    ``backward_fn`` maps the upstream gradient to one gradient (or None) per
    parent, in order.
    """
    return _result(np.asarray(data, dtype=np.float64), tuple(parents), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), False)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = tuple(np.argsort(axes))
    return _result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), False)


def getitem(a: Tensor, index) -> Tensor:
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _result(np.array(a.data[index]), (a,), back, False)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, False)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]

    def back(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _result(np.stack([t.data for t in tensors], axis=axis), tuple(tensors), back, False)


# -- sampling -------------------------------------------------------------------------

def bilinear_sample(feature_map: Tensor, points: Tensor) -> Tensor:
    """Sample ``feature_map`` [C, H, W] at continuous pixel coordinates.

    ``points`` is [N, 2] holding (x, y) with integer values at pixel centres.
    Neighbours outside the map read as zero.  Returns [C, N]; gradients flow
    to both the map and the coordinates.  A leading batch axis on both inputs
    ([B, C, H, W] with [B, N, 2]) samples each map at its own points.
    """
    fmap = feature_map.data
    batched = fmap.ndim == 4
    if batched:
        ok = points.ndim == 3 and points.shape[0] == fmap.shape[0] and points.shape[2] == 2
    else:
        ok = fmap.ndim == 3 and points.ndim == 2 and points.shape[1] == 2
    if not ok:
        raise ShapeError(f"bilinear_sample expects [C,H,W] and [N,2], got {fmap.shape} and {points.shape}")
    fm = fmap if batched else fmap[None]
    pts = points.data if batched else points.data[None]
    B, C, H, W = fm.shape
    N = pts.shape[1]
    x, y = pts[..., 0], pts[..., 1]
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx, fy = x - x0, y - y0
    bidx = np.broadcast_to(np.arange(B)[:, None], (B, N))
    corners = []
    out = np.zeros((B, C, N))
    for dx, dy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        ix, iy = x0 + dx, y0 + dy
        wx = fx if dx else 1.0 - fx
        wy = fy if dy else 1.0 - fy
        valid = (ix >= 0) & (ix < W) & (iy >= 0) & (iy < H)
        sel = (bidx[valid], iy[valid], ix[valid])
        vals = np.zeros((B, N, C))
        vals[valid] = fm[sel[0], :, sel[1], sel[2]]
        vals = vals.transpose(0, 2, 1)
        out += vals * (wx * wy)[:, None, :]
        corners.append((valid, sel, wx, wy, 1.0 if dx else -1.0, 1.0 if dy else -1.0, vals))
    result = out if batched else out[0]

    def back(g):
        g = g if batched else g[None]
        gmap = np.zeros_like(fm)
        gpts = np.zeros_like(pts)
        gt = g.transpose(0, 2, 1)  # [B, N, C]
        for valid, sel, wx, wy, sx, sy, vals in corners:
            w = (wx * wy)[valid]
            np.add.at(gmap, (sel[0], slice(None), sel[1], sel[2]), gt[valid] * w[:, None])
            contrib = (g * vals).sum(axis=1)
            gpts[..., 0] += contrib * sx * wy
            gpts[..., 1] += contrib * sy * wx
        if not batched:
            return gmap[0], gpts[0]
        return gmap, gpts

    return _result(result, (feature_map, points), back)


_CORNER_DX = np.array([0, 1, 0, 1])
_CORNER_DY = np.array([0, 0, 1, 1])


def sample_levels(value: Tensor, spatial_shapes: Sequence[tuple[int, int]], loc: Tensor) -> Tensor:
    """Bilinear sampling of a flattened feature pyramid, all heads and levels at once.

    ``value`` is [n_tokens, heads, C] with the levels' H x W grids flattened
    row-major and concatenated.  ``loc`` is [nq, heads, L, P, 2] holding
    normalized (x, y); level ``l`` is read at pixel ``(x * W_l - 0.5,
    y * H_l - 0.5)`` with the zero padding of :func:`bilinear_sample`.
    Returns [nq, heads, L, P, C].
    """
    v = value.data
    n_tok, h, c = v.shape
    L = len(spatial_shapes)
    Hs = np.array([hw[0] for hw in spatial_shapes], dtype=np.int64)
    Ws = np.array([hw[1] for hw in spatial_shapes], dtype=np.int64)
    if loc.ndim != 5 or loc.shape[1] != h or loc.shape[2] != L or loc.shape[4] != 2 or n_tok != int((Hs * Ws).sum()):
        raise ShapeError(f"sample_levels got value {v.shape}, loc {loc.shape} for levels {list(spatial_shapes)}")
    starts = np.concatenate([[0], np.cumsum(Hs * Ws)[:-1]])
    size = np.stack([Ws, Hs], axis=-1).astype(np.float64)[:, None, :]  # [L, 1, 2]
    pix = loc.data * size - 0.5
    x0 = np.floor(pix[..., 0])
    y0 = np.floor(pix[..., 1])
    fx = (pix[..., 0] - x0)[..., None]
    fy = (pix[..., 1] - y0)[..., None]
    ix = x0.astype(np.int64)[..., None] + _CORNER_DX  # [nq, h, L, P, 4]
    iy = y0.astype(np.int64)[..., None] + _CORNER_DY
    W_ = Ws[:, None, None]
    H_ = Hs[:, None, None]
    valid = (ix >= 0) & (ix < W_) & (iy >= 0) & (iy < H_)
    flat = np.where(valid, starts[:, None, None] + iy * W_ + ix, n_tok)  # n_tok indexes a zero row
    wx = np.where(_CORNER_DX == 1, fx, 1.0 - fx)
    wy = np.where(_CORNER_DY == 1, fy, 1.0 - fy)
    w = wx * wy
    rows = flat * h + np.arange(h).reshape(1, h, 1, 1, 1)  # row of (token, head) in a [n_tok * h, C] view
    padded = np.concatenate([v.reshape(-1, c), np.zeros((h, c))], axis=0)
    vals = np.take(padded, rows, axis=0)  # [nq, h, L, P, 4, C]
    out = np.einsum("...kc,...k->...c", vals, w)

    def back(g):
        gpad = np.zeros_like(padded)
        np.add.at(gpad, rows, g[..., None, :] * w[..., None])
        gw = np.einsum("...kc,...c->...k", vals, g)
        sx = np.where(_CORNER_DX == 1, 1.0, -1.0)
        sy = np.where(_CORNER_DY == 1, 1.0, -1.0)
        gx = (gw * sx * wy).sum(axis=-1)
        gy = (gw * sy * wx).sum(axis=-1)
        gloc = np.stack([gx, gy], axis=-1) * size
        return gpad[:-h].reshape(v.shape), gloc

    return _result(out, (value, loc), back)


# -- backward engine ----------------------------------------------------------------------

@dataclass
class Tape:
    """Topologically ordered record of the ops that produced a tensor."""

    nodes: list[Tensor] = field(default_factory=list)
    seed: int = 0

    @classmethod
    def from_output(cls, output: Tensor, seed: int = 0) -> "Tape":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack_: list[tuple[Tensor, bool]] = [(output, False)]
        while stack_:
            node, expanded = stack_.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack_.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack_.append((parent, False))
        return cls(order, seed)


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = tape or Tape.from_output(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = np.array(pg, dtype=np.float64)
