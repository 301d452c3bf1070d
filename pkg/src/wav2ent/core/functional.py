"""Differentiable operations.

Each op computes its forward value with numpy and registers a closure that
maps the upstream gradient to one gradient per input. Elementwise binary
ops broadcast like numpy; their gradients are summed back to input shape.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import IndexOutOfRange, InputTooShort, ShapeMismatch
from .tensor import Tensor, as_tensor

LN_EPS = 1e-5
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data + b.data
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data - b.data
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data * b.data

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return Tensor.from_op(out, (a, b), back, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def back(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)
    return Tensor.from_op(out, (a, b), back, "div")


def power(a: Tensor, p: float) -> Tensor:
    out = a.data ** p
    return Tensor.from_op(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor.from_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return Tensor.from_op(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0)
    return Tensor.from_op(out, (a,), lambda g: (g * (a.data > 0),), "relu")


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    neg = alpha * np.expm1(np.minimum(x, 0))
    out = np.where(x > 0, x, neg).astype(x.dtype)
    return Tensor.from_op(out, (a,), lambda g: (g * np.where(x > 0, 1.0, neg + alpha).astype(x.dtype),), "elu")


def gelu(a: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    x = a.data
    inner = _SQRT_2_OVER_PI * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def back(g):
        dinner = _SQRT_2_OVER_PI * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)
    return Tensor.from_op(out.astype(x.dtype), (a,), back, "gelu")


# -- reductions and shape ops -------------------------------------------------

def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    # accumulate in float64, store in the input precision
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(a.dtype)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).astype(a.dtype),)
    return Tensor.from_op(np.asarray(out), (a,), back, "sum")


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return mul(sum(a, axis, keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return Tensor.from_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return Tensor.from_op(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    out = np.swapaxes(a.data, i, j)
    return Tensor.from_op(out, (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


def _is_basic_index(idx) -> bool:
    parts = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(p, (int, np.integer, slice)) or p is None or p is Ellipsis for p in parts)


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def back(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] += g
        else:
            np.add.at(full, idx, g)
        return (full,)
    return Tensor.from_op(np.asarray(out), (a,), back, "index")


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def back(g):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) for lo, hi in zip(bounds[:-1], bounds[1:]))
    return Tensor.from_op(out, tensors, back, "concat")


def stack(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    out = np.stack([t.data for t in tensors], axis=axis)

    def back(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))
    return Tensor.from_op(out, tensors, back, "stack")


def where(mask, a, b) -> Tensor:
    """``a`` where mask is true else ``b``; mask is a plain boolean array."""
    a, b = _pair(a, b)
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, a.data, b.data)
    return Tensor.from_op(out, (a, b), lambda g: (_unbroadcast(np.where(mask, g, 0), a.shape),
                                                  _unbroadcast(np.where(mask, 0, g), b.shape)), "where")


# -- linear algebra ----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batch broadcasting over leading axes."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return Tensor.from_op(out, (a, b), back, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ b) with w stored as [in, out]."""
    if x.shape[-1] != w.shape[0]:
        raise ShapeMismatch(f"linear input width {x.shape[-1]} != {w.shape[0]}")
    lead = x.shape[:-1]
    y = matmul(reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = add(y, b)
    return reshape(y, lead + (w.shape[1],))


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexOutOfRange(f"ids outside [0, {V})")
    out = table.data[ids]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)
    return Tensor.from_op(out, (table,), back, "embedding")


# -- normalization and distributions -----------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeMismatch(f"layer_norm over width {d} with gamma {gamma.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def back(g):
        red = tuple(range(g.ndim - 1))
        dg = (g * xhat).sum(axis=red) if gamma.requires_grad else None
        db = g.sum(axis=red) if beta.requires_grad else None
        dx = None
        if x.requires_grad:
            dxh = g * gamma.data
            dx = inv * (dxh - dxh.mean(axis=-1, keepdims=True)
                        - xhat * (dxh * xhat).mean(axis=-1, keepdims=True))
        return dx, dg, db
    return Tensor.from_op(out.astype(x.dtype), (x, gamma, beta), back, "layer_norm")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Tensor.from_op(out, (x,), back, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return Tensor.from_op(out, (x,), back, "log_softmax")


def logsumexp(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    m = x.data.max(axis=axis, keepdims=True)
    s = np.log(np.exp(x.data - m).sum(axis=axis, keepdims=True)) + m
    out = s if keepdims else np.squeeze(s, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * np.exp(x.data - s),)
    return Tensor.from_op(out, (x,), back, "logsumexp")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under row softmax."""
    targets = np.asarray(targets, dtype=np.int64)
    lp = log_softmax(logits, axis=-1)
    picked = index(lp, (np.arange(targets.size), targets))
    return mul(sum(picked), -1.0 / max(targets.size, 1))


# -- convolutions ------------------------------------------------------------

def _conv_windows(x: np.ndarray, k: int, stride: int, dilation: int) -> np.ndarray:
    """[..., C, T] -> [..., T', C, k] view of the dilated receptive fields."""
    span = (k - 1) * dilation + 1
    win = sliding_window_view(x, span, axis=-1)[..., ::stride, ::dilation]
    return np.swapaxes(win, -3, -2)


def _conv(x: Tensor, w: Tensor, stride: int, dilation: int, op: str) -> Tensor:
    c_out, c_in, k = w.shape
    if x.shape[-2] != c_in:
        raise ShapeMismatch(f"conv expects {c_in} input channels, got {x.shape[-2]}")
    T = x.shape[-1]
    span = (k - 1) * dilation + 1
    if T < span:
        raise InputTooShort(f"input length {T} shorter than receptive field {span}")
    t_out = (T - span) // stride + 1
    cols = _conv_windows(x.data, k, stride, dilation).reshape(x.shape[:-2] + (t_out, c_in * k))
    wmat = w.data.reshape(c_out, c_in * k)
    out = np.swapaxes(cols @ wmat.T, -1, -2)

    def back(g):
        gt = np.swapaxes(g, -1, -2)  # [..., T', c_out]
        gw = None
        if w.requires_grad:
            gw = (gt.reshape(-1, c_out).T @ cols.reshape(-1, c_in * k)).reshape(w.shape)
        gx = None
        if x.requires_grad:
            gcols = (gt @ wmat).reshape(x.shape[:-2] + (t_out, c_in, k))
            gx = np.zeros_like(x.data)
            last = stride * (t_out - 1) + 1
            for j in range(k):
                off = j * dilation
                gx[..., :, off:off + last:stride] += np.swapaxes(gcols[..., j], -1, -2)
        return gx, gw
    return Tensor.from_op(np.ascontiguousarray(out), (x, w), back, op)


def conv1d(x: Tensor, kernels: Tensor, stride: int = 1) -> Tensor:
    """Valid cross-correlation: [..., c_in, T] * [c_out, c_in, k] -> [..., c_out, T']."""
    if stride < 1:
        raise ValueError("stride must be positive")
    return _conv(x, kernels, stride, 1, "conv1d")


def pad_time(x: Tensor, left: int, right: int) -> Tensor:
    widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    out = np.pad(x.data, widths)
    T = x.shape[-1]
    return Tensor.from_op(out, (x,), lambda g: (g[..., left:left + T],), "pad")


def dilated_conv1d(x: Tensor, kernels: Tensor, stride: int = 1, dilation: int = 1,
                   strict: bool = True) -> Tensor:
    """Dilated convolution with symmetric zero padding to keep the length.

    With ``strict`` the input must cover one dilated kernel span; callers
    that rely on padding for short inputs pass ``strict=False``.
    """
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    k = kernels.shape[-1]
    span = (k - 1) * dilation + 1
    if strict and x.shape[-1] < span:
        raise InputTooShort(f"input length {x.shape[-1]} shorter than dilated span {span}")
    total = span - 1
    left = total // 2
    return _conv(pad_time(x, left, total - left), kernels, stride, dilation, "dilated_conv1d")


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1, eps: float = 1e-8) -> Tensor:
    """dot(a, b) / max(|a| |b|, eps), broadcasting over the other axes."""
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    na = np.sqrt((a.data * a.data).sum(axis=axis, keepdims=True))
    nb = np.sqrt((b.data * b.data).sum(axis=axis, keepdims=True))
    prod = na * nb
    guarded = prod <= eps
    den = np.where(guarded, eps, prod)
    s = dot / den

    def back(g):
        g = np.expand_dims(g, axis)
        ga = gb = None
        if a.requires_grad:
            corr = np.where(guarded, 0.0, s / np.maximum(na * na, 1e-300))
            ga = _unbroadcast(g * (b.data / den - corr * a.data), a.shape)
        if b.requires_grad:
            corr = np.where(guarded, 0.0, s / np.maximum(nb * nb, 1e-300))
            gb = _unbroadcast(g * (a.data / den - corr * b.data), b.shape)
        return ga, gb
    return Tensor.from_op(np.squeeze(s, axis).astype(a.dtype), (a, b), back, "cosine")


def straight_through(soft: Tensor, hard: np.ndarray) -> Tensor:
    """Forward value ``hard``; gradient flows to ``soft`` unchanged."""
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeMismatch(f"straight-through shapes {hard.shape} vs {soft.shape}")
    return Tensor.from_op(hard, (soft,), lambda g: (g,), "straight_through")
