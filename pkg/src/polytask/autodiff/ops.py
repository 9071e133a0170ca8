"""Differentiable primitive operations.

Each op computes its forward result with numpy and registers a closure that
maps the output gradient to per-input gradients. Closures receive a ``needs``
tuple so they can skip gradient work for inputs that do not require it (for
example image pixels during training).

All ops preserve the dtype of their floating-point inputs; gradient tests run
these at 64-bit while training may use 32-bit arrays.
"""
from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from scipy import special as _special

from .tensor import Tensor, as_tensor, record_op

_INV_SQRT2 = float(1.0 / math.sqrt(2.0))
_INV_SQRT_2PI = float(1.0 / math.sqrt(2.0 * math.pi))


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape of the operand it belongs to."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (gs, ss) in enumerate(zip(g.shape, shape)) if ss == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def cast(a, dtype) -> Tensor:
    """Recorded dtype conversion; the gradient is cast back on the way down.

    Plain astype on a tensor's data would mint a fresh leaf and silently cut
    the graph, so every dtype change of a live tensor must go through here.
    """
    a = as_tensor(a)
    dtype = np.dtype(dtype)
    if a.dtype == dtype:
        return a
    src = a.dtype

    def backward(g, needs):
        return (g.astype(src) if needs[0] else None,)

    return record_op("cast", (a,), a.data.astype(dtype), backward)


def _coerce_pair(a, b):
    was_a, was_b = isinstance(a, Tensor), isinstance(b, Tensor)
    a = as_tensor(a)
    b = as_tensor(b)
    if a.dtype == b.dtype:
        return a, b
    # constants adopt the graph operand's dtype so float32 graphs stay float32
    if was_a and not was_b:
        return a, cast(b, a.dtype)
    if was_b and not was_a:
        return cast(a, b.dtype), b
    if a.ndim == 0 and b.ndim > 0:
        target = b.dtype
    elif b.ndim == 0 and a.ndim > 0:
        target = a.dtype
    else:
        target = np.result_type(a.dtype, b.dtype)
    return cast(a, target), cast(b, target)


def add(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data + b.data

    def backward(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(g, b.data.shape) if needs[1] else None,
        )

    return record_op("add", (a, b), out, backward)


def sub(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data - b.data

    def backward(g, needs):
        return (
            _unbroadcast(g, a.data.shape) if needs[0] else None,
            _unbroadcast(-g, b.data.shape) if needs[1] else None,
        )

    return record_op("sub", (a, b), out, backward)


def mul(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data * b.data

    def backward(g, needs):
        return (
            _unbroadcast(g * b.data, a.data.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.data.shape) if needs[1] else None,
        )

    return record_op("mul", (a, b), out, backward)


def div(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    out = a.data / b.data

    def backward(g, needs):
        return (
            _unbroadcast(g / b.data, a.data.shape) if needs[0] else None,
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape) if needs[1] else None,
        )

    return record_op("div", (a, b), out, backward)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def backward(g, needs):
        return (-g,)

    return record_op("neg", (a,), -a.data, backward)


def matmul(a, b) -> Tensor:
    """Matrix product with numpy stacking/broadcast semantics (operands >= 2-d)."""
    a, b = _coerce_pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul expects operands with at least 2 dimensions")
    out = np.matmul(a.data, b.data)

    def backward(g, needs):
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.data.shape)
        if needs[1]:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.data.shape)
        return ga, gb

    return record_op("matmul", (a, b), out, backward)


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def backward(g, needs):
        return (np.transpose(g, inv),)

    return record_op("transpose", (a,), np.transpose(a.data, axes), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    old = a.data.shape

    def backward(g, needs):
        return (g.reshape(old),)

    return record_op("reshape", (a,), a.data.reshape(shape), backward)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    if not parts:
        raise ValueError("concat requires at least one tensor")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g, needs):
        grads = []
        for i, p in enumerate(parts):
            if needs[i]:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(offsets[i], offsets[i + 1])
                grads.append(g[tuple(idx)])
            else:
                grads.append(None)
        return grads

    return record_op("concat", parts, out, backward)


def slice_(a, key) -> Tensor:
    """Basic (non-fancy) slicing; gradient scatters back into a zero array."""
    a = as_tensor(a)
    out = a.data[key]

    def backward(g, needs):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return record_op("slice", (a,), np.ascontiguousarray(out), backward)


def take(a, indices, axis: int = 0) -> Tensor:
    """Integer-array indexing along one axis; repeated indices accumulate."""
    a = as_tensor(a)
    idx = np.asarray(indices)
    if idx.ndim != 1:
        raise ValueError("take expects a 1-d index array")
    out = np.take(a.data, idx, axis=axis)

    def backward(g, needs):
        full = np.zeros_like(a.data)
        # moveaxis views alias `full`, so scatter-adds land in the right place
        np.add.at(np.moveaxis(full, axis, 0), idx, np.moveaxis(g, axis, 0))
        return (full,)

    return record_op("take", (a,), out, backward)


def embedding(table, ids) -> Tensor:
    """Row lookup: table (V, d) indexed by an integer id array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError("embedding id out of range")
    out = table.data[ids]

    def backward(g, needs):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return record_op("embedding", (table,), out, backward)


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    out = np.where(mask, a.data, 0.0).astype(a.dtype)

    def backward(g, needs):
        return (np.where(mask, g, 0.0),)

    return record_op("relu", (a,), out, backward)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _special.expit(a.data)

    def backward(g, needs):
        return (g * out * (1.0 - out),)

    return record_op("sigmoid", (a,), out, backward)


def gelu(a) -> Tensor:
    """Exact GeLU x * Phi(x) with Phi the standard normal CDF (erf form)."""
    a = as_tensor(a)
    if not np.all(np.isfinite(a.data)):
        raise ValueError("gelu received non-finite input")
    cdf = 0.5 * (1.0 + _special.erf(a.data * _INV_SQRT2))
    out = (a.data * cdf).astype(a.dtype)

    def backward(g, needs):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (cdf + a.data * pdf),)

    return record_op("gelu", (a,), out, backward)


def abs_(a) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data)

    def backward(g, needs):
        return (g * sign,)

    return record_op("abs", (a,), np.abs(a.data), backward)


def maximum(a, b) -> Tensor:
    """Elementwise max; on exact ties the gradient routes to the first operand."""
    a, b = _coerce_pair(a, b)
    pick_a = a.data >= b.data
    out = np.where(pick_a, a.data, b.data)

    def backward(g, needs):
        return (
            _unbroadcast(np.where(pick_a, g, 0.0), a.data.shape) if needs[0] else None,
            _unbroadcast(np.where(pick_a, 0.0, g), b.data.shape) if needs[1] else None,
        )

    return record_op("maximum", (a, b), out, backward)


def minimum(a, b) -> Tensor:
    a, b = _coerce_pair(a, b)
    pick_a = a.data <= b.data
    out = np.where(pick_a, a.data, b.data)

    def backward(g, needs):
        return (
            _unbroadcast(np.where(pick_a, g, 0.0), a.data.shape) if needs[0] else None,
            _unbroadcast(np.where(pick_a, 0.0, g), b.data.shape) if needs[1] else None,
        )

    return record_op("minimum", (a, b), out, backward)


def sum_(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g, needs):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis if isinstance(axis, int) else tuple(axis))
        return (np.broadcast_to(g, a.data.shape).copy(),)

    return record_op("sum", (a,), out, backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out.size, 1)

    def backward(g, needs):
        g = np.asarray(g)
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis if isinstance(axis, int) else tuple(axis))
        return (np.broadcast_to(g, a.data.shape) / count,)

    return record_op("mean", (a,), out, backward)


def l1_distance(a, b) -> Tensor:
    """Sum of absolute differences, reduced to a scalar."""
    a, b = _coerce_pair(a, b)
    diff = a.data - b.data
    sign = np.sign(diff)

    def backward(g, needs):
        return (
            g * sign if needs[0] else None,
            -g * sign if needs[1] else None,
        )

    return record_op("l1_distance", (a, b), np.abs(diff).sum(), backward)


def dropout(a: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    """Inverted dropout: zero a fraction p and rescale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode requires an rng")
    keep = rng.random(a.data.shape) >= p
    scale = 1.0 / (1.0 - p)
    out = np.where(keep, a.data * scale, 0.0).astype(a.dtype)

    def backward(g, needs):
        return (np.where(keep, g * scale, 0.0),)

    return record_op("dropout", (a,), out, backward)


def softmax(a, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along ``axis``.

    Inputs may contain -inf (used for attention masking); rows must have at
    least one finite entry.
    """
    a = as_tensor(a)
    if a.data.shape[axis] == 0:
        raise ValueError("softmax along an empty axis")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g, needs):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return record_op("softmax", (a,), out, backward)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale-shift."""
    if eps <= 0:
        raise ValueError("layer_norm eps must be positive")
    x = as_tensor(x)
    gamma = as_tensor(gamma)
    beta = as_tensor(beta)
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ValueError("gamma/beta must match the last input extent")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = gamma.data * xhat + beta.data

    def backward(g, needs):
        n = x.data.shape[-1]
        gx = ggamma = gbeta = None
        if needs[0]:
            gxhat = g * gamma.data
            gx = inv_std * (
                gxhat
                - gxhat.mean(axis=-1, keepdims=True)
                - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if needs[1]:
            reduce_axes = tuple(range(g.ndim - 1))
            ggamma = (g * xhat).sum(axis=reduce_axes)
        if needs[2]:
            reduce_axes = tuple(range(g.ndim - 1))
            gbeta = g.sum(axis=reduce_axes)
        return gx, ggamma, gbeta

    return record_op("layer_norm", (x, gamma, beta), out, backward)


def cross_entropy(logits, targets, class_weights=None, reduction: str = "mean") -> Tensor:
    """Weighted cross entropy over integer class targets.

    ``logits`` is (N, C) or (C,); ``targets`` an int array of shape (N,) or a
    scalar. With weights w, per-sample loss is -w[t] * log softmax(logits)[t];
    'mean' divides the weighted sum by the total weight of the batch (the
    weight-normalized reduction), 'sum' leaves it unnormalized.
    """
    logits = as_tensor(logits)
    squeeze = logits.ndim == 1
    data = logits.data.reshape(1, -1) if squeeze else logits.data
    if data.ndim != 2:
        raise ValueError("cross_entropy expects logits of shape (N, C) or (C,)")
    n, c = data.shape
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if t.shape != (n,):
        raise ValueError(f"targets shape {t.shape} does not match batch size {n}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"target out of range for {c} classes")
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    if class_weights is None:
        w = np.ones(c, dtype=data.dtype)
    else:
        w = np.asarray(class_weights, dtype=data.dtype)
        if w.shape != (c,):
            raise ValueError("class_weights must have one entry per class")
    shifted = data - data.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    sample_w = w[t]
    nll = -log_probs[np.arange(n), t] * sample_w
    total_w = sample_w.sum()
    if reduction == "mean":
        value = nll.sum() / total_w
        scale = 1.0 / total_w
    else:
        value = nll.sum()
        scale = 1.0

    def backward(g, needs):
        probs = np.exp(log_probs)
        grad = probs * sample_w[:, None]
        grad[np.arange(n), t] -= sample_w
        grad *= float(g) * scale
        return (grad.reshape(logits.data.shape),)

    return record_op("cross_entropy", (logits,), np.asarray(value, dtype=data.dtype).reshape(()), backward)


def conv2d(x, weight, bias, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d convolution, channels-last: x (B,H,W,Cin), weight (kh,kw,Cin,Cout)."""
    x = as_tensor(x)
    weight = as_tensor(weight)
    bias = as_tensor(bias)
    b, h, w, cin = x.shape
    kh, kw, wcin, cout = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {wcin}")
    if bias.shape != (cout,):
        raise ValueError("conv2d bias must have one entry per output channel")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError("conv2d output would be empty")
    xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding), (0, 0))) if padding else x.data
    # im2col: patches (B, Ho, Wo, kh*kw*Cin) assembled offset by offset
    cols = np.empty((b, ho, wo, kh * kw, cin), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, :, :, ky * kw + kx, :] = xp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :]
    patches = cols.reshape(b, ho, wo, kh * kw * cin)
    w2d = weight.data.reshape(kh * kw * cin, cout)
    out = patches @ w2d + bias.data

    def backward(g, needs):
        gx = gw = gb = None
        g2d = g.reshape(-1, cout)
        if needs[2]:
            gb = g2d.sum(axis=0)
        if needs[1]:
            gw = (patches.reshape(-1, kh * kw * cin).T @ g2d).reshape(weight.shape)
        if needs[0]:
            dpatches = (g2d @ w2d.T).reshape(b, ho, wo, kh * kw, cin)
            dxp = np.zeros((b, h + 2 * padding, w + 2 * padding, cin), dtype=x.dtype)
            for ky in range(kh):
                for kx in range(kw):
                    dxp[:, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride, :] += dpatches[
                        :, :, :, ky * kw + kx, :
                    ]
            gx = dxp[:, padding : padding + h, padding : padding + w, :] if padding else dxp
        return gx, gw, gb

    return record_op("conv2d", (x, weight, bias), out, backward)
