"""Differentiable primitives.

Every function takes and returns :class:`Tensor` objects; plain arrays and
Python scalars are accepted as constants. A primitive records a node on the
active tape only if one of its inputs requires a gradient.
"""
from __future__ import annotations

import numpy as np

from ..errors import DimensionError
from . import _backend
from .tensor import Tensor, as_tensor, current_tape


def _emit(arr, inputs, vjp):
    tape = current_tape()
    needs = tape is not None and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor._wrap(arr, requires_grad=needs)
    if needs:
        tape.record(out, inputs, vjp)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _emit(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        ),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _emit(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None,
        ),
    )


def power(x, exponent):
    x = as_tensor(x)
    p = float(exponent)
    return _emit(x.data**p, (x,), lambda g: (g * p * x.data ** (p - 1.0),))


def log(x):
    x = as_tensor(x)
    return _emit(np.log(x.data), (x,), lambda g: (g / x.data,))


def clip(x, lo, hi):
    """Clamp to ``[lo, hi]``; the gradient is zero where clamping bites."""
    x = as_tensor(x)
    inside = (x.data >= lo) & (x.data <= hi)
    return _emit(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


def relu(x):
    """max(x, 0) with subgradient 0 at exactly 0."""
    x = as_tensor(x)
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0).astype(x.dtype, copy=False), (x,), lambda g: (g * mask,))


# ----------------------------------------------------------------- reductions

def sum(x, axis=None):  # noqa: A001
    x = as_tensor(x)
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis)), (x,), vjp)


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    shape = x.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit(np.asarray(x.data.sum(axis=axis) / count), (x,), vjp)


# ----------------------------------------------------------------- indexing

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, cuts, axis=axis))

    return _emit(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), vjp)


def take_rows(x, rows):
    """``x[rows]`` along axis 0; rows may repeat."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.intp)

    def vjp(g):
        out = np.zeros_like(x.data)
        np.add.at(out, rows, g)
        return (out,)

    return _emit(x.data[rows], (x,), vjp)


def gather(x, index):
    """Pick ``x[i, index[i]]`` from a 2-D tensor."""
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.intp)
    if x.ndim != 2 or index.shape != (x.shape[0],):
        raise DimensionError(f"gather needs [N, K] and [N] index, got {x.shape} and {index.shape}")
    rows = np.arange(x.shape[0])

    def vjp(g):
        out = np.zeros_like(x.data)
        out[rows, index] = g
        return (out,)

    return _emit(x.data[rows, index], (x,), vjp)


# -------------------------------------------------------------- network ops

def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation via im2col and one matrix product."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4:
        raise DimensionError(f"conv2d input must be [N, C, H, W], got {x.shape}")
    if weight.ndim != 4:
        raise DimensionError(f"conv2d weight must be [C_out, C_in, kH, kW], got {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise DimensionError(f"conv2d channel axis (axis 1): input has {c}, weight expects {c_in}")
    if h + 2 * padding < kh:
        raise DimensionError(f"conv2d height axis (axis 2): {h}+2*{padding} < kernel {kh}")
    if w + 2 * padding < kw:
        raise DimensionError(f"conv2d width axis (axis 3): {w}+2*{padding} < kernel {kw}")
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise DimensionError(f"conv2d bias must be [{c_out}], got {bias.shape}")
    if stride < 1 or padding < 0:
        raise DimensionError("conv2d needs stride >= 1 and padding >= 0")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    xp = np.ascontiguousarray(xp)
    hp, wp = xp.shape[2], xp.shape[3]
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = _backend.im2col(xp, kh, kw, stride)
    wmat = weight.data.reshape(c_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, c_out).transpose(0, 3, 1, 2))

    def vjp(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        dw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dxp = _backend.col2im(
                np.ascontiguousarray(g2 @ wmat), n, c, hp, wp, kh, kw, stride
            )
            dx = np.ascontiguousarray(dxp[:, :, padding:padding + h, padding:padding + w])
        return dx, dw, db

    inputs = (x, weight, bias) if bias is not None else (x, weight)
    return _emit(out, inputs, vjp if bias is not None else (lambda g: vjp(g)[:2]))


class BatchNormStats:
    """Running mean/variance buffers for one batch-norm layer."""

    def __init__(self, channels, dtype=np.float64):
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)


def batch_norm(x, gamma, beta, stats=None, training=True, momentum=0.1, eps=1e-5):
    """Per-channel normalization of an [N, C, H, W] tensor.

    Training mode normalizes by the (biased) batch statistics and folds them
    into ``stats`` with the unbiased variance; eval mode reads ``stats``.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise DimensionError(f"batch_norm input must be [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise DimensionError(f"batch_norm channel axis (axis 1): {c} vs gamma {gamma.shape}")
    count = n * h * w
    if count < 1:
        raise DimensionError("batch_norm needs N*H*W >= 1")
    if eps <= 0:
        raise DimensionError("batch_norm needs eps > 0")
    g4 = gamma.data.reshape(1, c, 1, 1)

    if training:
        mu = x.data.mean(axis=(0, 2, 3))
        centered = x.data - mu.reshape(1, c, 1, 1)
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = centered * inv_std.reshape(1, c, 1, 1)
        if stats is not None:
            unbiased = var * count / (count - 1) if count > 1 else var
            stats.mean = (1.0 - momentum) * stats.mean + momentum * mu
            stats.var = (1.0 - momentum) * stats.var + momentum * unbiased

        def vjp(g):
            dgamma = (g * xhat).sum(axis=(0, 2, 3))
            dbeta = g.sum(axis=(0, 2, 3))
            dx = None
            if x.requires_grad:
                dxhat = g * g4
                s1 = dxhat.sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(1, c, 1, 1)
                dx = (inv_std.reshape(1, c, 1, 1) / count) * (count * dxhat - s1 - xhat * s2)
            return dx, dgamma, dbeta
    else:
        if stats is None:
            raise DimensionError("batch_norm eval mode needs running stats")
        inv_std = 1.0 / np.sqrt(stats.var + eps)
        xhat = (x.data - stats.mean.reshape(1, c, 1, 1)) * inv_std.reshape(1, c, 1, 1)

        def vjp(g):
            dx = g * g4 * inv_std.reshape(1, c, 1, 1) if x.requires_grad else None
            return dx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    out = xhat * g4 + beta.data.reshape(1, c, 1, 1)
    return _emit(out, (x, gamma, beta), vjp)


def global_average_pool(x):
    """Mean of each feature map: [N, C, H, W] -> [N, C]."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_average_pool input must be [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 1:
        raise DimensionError("global_average_pool: empty spatial extent (axes 2, 3)")
    area = h * w
    return _emit(
        x.data.sum(axis=(2, 3)) / area,
        (x,),
        lambda g: (np.broadcast_to((g / area)[:, :, None, None], x.shape).copy(),),
    )


def global_max_pool(x):
    """Max of each feature map; the gradient goes to the first row-major argmax."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"global_max_pool input must be [N, C, H, W], got {x.shape}")
    n, c, h, w = x.shape
    if h * w < 1:
        raise DimensionError("global_max_pool: empty spatial extent (axes 2, 3)")
    flat = x.data.reshape(n, c, h * w)
    idx = flat.argmax(axis=2)

    def vjp(g):
        out = np.zeros_like(flat)
        np.put_along_axis(out, idx[:, :, None], g[:, :, None], axis=2)
        return (out.reshape(x.shape),)

    return _emit(np.take_along_axis(flat, idx[:, :, None], axis=2)[:, :, 0], (x,), vjp)


def affine(x, weight, bias=None):
    """``x @ weight.T + bias`` for x [N, D_in], weight [D_out, D_in]."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 2 or weight.ndim != 2:
        raise DimensionError(f"affine needs 2-D input and weight, got {x.shape}, {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(
            f"affine inner axis (axis 1): input has {x.shape[1]}, weight expects {weight.shape[1]}"
        )
    out = x.data @ weight.data.T
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"affine bias must be [{weight.shape[0]}], got {bias.shape}")
        out = out + bias.data

        return _emit(
            out,
            (x, weight, bias),
            lambda g: (g @ weight.data if x.requires_grad else None, g.T @ x.data, g.sum(axis=0)),
        )
    return _emit(out, (x, weight), lambda g: (g @ weight.data if x.requires_grad else None, g.T @ x.data))


def softmax(logits):
    """Row-wise softmax with max subtraction."""
    logits = as_tensor(logits)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DimensionError(f"softmax needs [N, K] with K >= 2, got {logits.shape}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    return _emit(p, (logits,), lambda g: (p * (g - (g * p).sum(axis=1, keepdims=True)),))


def dropout(x, rate, rng, training=True):
    """Inverted dropout; identity when not training or ``rate == 0``."""
    x = as_tensor(x)
    if not training or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _emit(x.data * keep, (x,), lambda g: (g * keep,))
