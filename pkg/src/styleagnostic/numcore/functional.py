"""Differentiable operations on :class:`Tensor`.

Every op computes its forward value with numpy and returns a tensor whose
node carries the local vector-Jacobian product.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from .tensor import Tensor, as_tensor, make_result

_MUL_COUNTER: list = []


class count_multiplies:
    """Context manager tallying scalar multiplies done by conv2d and linear.

    Only the two layer types that dominate inference cost are counted; the
    count is exact for them.
    """

    def __init__(self) -> None:
        self.total = 0

    def __enter__(self) -> "count_multiplies":
        _MUL_COUNTER.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _MUL_COUNTER.remove(self)


def _tally(n: int) -> None:
    for c in _MUL_COUNTER:
        c.total += int(n)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _wrap(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


# elementwise ------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_result("add", a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_result("sub", a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))

    ad, bd = a.data, b.data

    def bw(g):
        return (_unbroadcast(g * bd, a.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, b.shape) if b.requires_grad else None)

    return make_result("mul", ad * bd, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = (_wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None))
    if np.any(b.data == 0):
        raise ZeroDivisionError("div by a tensor containing zeros")
    bd = b.data
    out = a.data / bd

    def bw(g):
        return (_unbroadcast(g / bd, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, b.shape) if b.requires_grad else None)

    return make_result("div", out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    ad = a.data
    out = ad ** exponent

    def bw(g):
        return (g * exponent * ad ** (exponent - 1.0),)

    return make_result("pow", out, (a,), bw)


def square(a: Tensor) -> Tensor:
    ad = a.data
    return make_result("square", ad * ad, (a,), lambda g: (2.0 * g * ad,))


def sqrt(a: Tensor) -> Tensor:
    if np.any(a.data < 0):
        raise ValueError("sqrt of negative values")
    out = np.sqrt(a.data)
    return make_result("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise ValueError("log of non-positive values")
    ad = a.data
    return make_result("log", np.log(ad), (a,), lambda g: (g / ad,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return make_result("relu", np.where(mask, a.data, 0).astype(a.dtype, copy=False), (a,),
                       lambda g: (g * mask,))


# reductions and shape ---------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return make_result("sum", np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape),)

    return make_result("mean", np.asarray(out), (a,), bw)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return make_result("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def take(a: Tensor, index, axis: int = 0) -> Tensor:
    """Gather slices of ``a`` along ``axis``; repeated indices accumulate gradient."""
    index = np.asarray(index, dtype=np.intp)
    out = np.take(a.data, index, axis=axis)

    def bw(g):
        ga = np.zeros_like(a.data)
        moved = np.moveaxis(ga, axis, 0)
        np.add.at(moved, index, np.moveaxis(g, axis, 0))
        return (ga,)

    return make_result("take", out, (a,), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return make_result("concat", out, tuple(tensors), bw)


# layers ------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul inner dimension mismatch: {a.shape[1]} vs {b.shape[0]}")
    _tally(a.shape[0] * a.shape[1] * b.shape[1])
    ad, bd = a.data, b.data

    def bw(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return make_result("matmul", ad @ bd, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.ndim != 2:
        raise ValueError(f"linear needs a 2-D input (flatten first), got shape {x.shape}")
    if weight.ndim != 2 or weight.shape[1] != x.shape[1]:
        raise ValueError(f"linear input features {x.shape[1]} do not match weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ValueError(f"linear bias shape {bias.shape} != ({weight.shape[0]},)")
    _tally(x.shape[0] * weight.shape[0] * weight.shape[1])
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        grads = [g @ wd if x.requires_grad else None,
                 g.T @ xd if weight.requires_grad else None]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return make_result("linear", out, inputs, bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, input (N,C,H,W), kernel (F,C,k,k)."""
    if x.ndim != 4:
        raise ValueError(f"conv2d input must be (N,C,H,W), got shape {x.shape}")
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"conv2d kernel must be (F,C,k,k), got shape {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    n, c, h, w = x.shape
    f, kc, k, _ = kernel.shape
    if kc != c:
        raise ValueError(f"conv2d channel dimension mismatch: input C={c}, kernel C={kc}")
    if k > h + 2 * padding:
        raise ValueError(f"conv2d height dimension too small: k={k} > H+2p={h + 2 * padding}")
    if k > w + 2 * padding:
        raise ValueError(f"conv2d width dimension too small: k={k} > W+2p={w + 2 * padding}")
    if bias is not None and bias.shape != (f,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({f},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # win: (N, C, Ho, Wo, k, k) -> cols (N*Ho*Wo, C*k*k)
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * ho * wo, c * k * k)
    wmat = kernel.data.reshape(f, c * k * k)
    _tally(n * ho * wo * f * c * k * k)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2))
    inputs = (x, kernel) if bias is None else (x, kernel, bias)

    def bw(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gx = gk = gb = None
        if kernel.requires_grad:
            gk = (gmat.T @ cols).reshape(kernel.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        if x.requires_grad:
            gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
            gxp = np.zeros(xp.shape, dtype=np.result_type(g, wmat))
            for i in range(k):
                for j in range(k):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                        gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        grads = (gx, gk) if bias is None else (gx, gk, gb)
        return grads

    return make_result("conv2d", out, inputs, bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N,C,H,W) -> (N,C)"""
    if x.ndim != 4:
        raise ValueError(f"global_avg_pool needs (N,C,H,W), got {x.shape}")
    return mean(x, axis=(2, 3))


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise ValueError("log_softmax over an empty class axis")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def bw(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_result("log_softmax", out, (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    return exp(log_softmax(x, axis=axis))


def instance_norm(x: Tensor, eps: float) -> Tensor:
    """Normalize each (sample, channel) map to zero mean and unit std."""
    mu = mean(x, axis=(2, 3), keepdims=True)
    centered = x - mu
    sigma = sqrt(mean(square(centered), axis=(2, 3), keepdims=True) + eps)
    return centered / sigma


def layer_norm(x: Tensor, eps: float) -> Tensor:
    """Normalize each sample over all non-batch axes."""
    axes = tuple(range(1, x.ndim))
    mu = mean(x, axis=axes, keepdims=True)
    centered = x - mu
    sigma = sqrt(mean(square(centered), axis=axes, keepdims=True) + eps)
    return centered / sigma
