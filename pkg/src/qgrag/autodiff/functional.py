"""Differentiable operations on :class:`~qgrag.autodiff.tensor.Tensor`."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidSegmentIds, ShapeMismatch
from .tensor import Tensor, as_tensor, make_result, _state


def _record_pattern(mask):
    """Hand the activation pattern of a piecewise-linear op to an active monitor."""
    patterns = getattr(_state, "kink_patterns", None)
    if patterns is not None:
        patterns.append(mask)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, like=a)
    else:
        a = as_tensor(a, like=b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from None
    return a, b


# --- elementwise ------------------------------------------------------------


def add(a, b):
    a, b = _binary_operands(a, b)
    return make_result(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b):
    a, b = _binary_operands(a, b)
    return make_result(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b):
    a, b = _binary_operands(a, b)
    return make_result(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def relu(x):
    mask = x.data > 0
    _record_pattern(mask)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


def leaky_relu(x, slope=0.2):
    _record_pattern(x.data > 0)
    factor = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return make_result(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x):
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    # keep the output inside the open interval even when it rounds to 0 or 1
    info = np.finfo(x.dtype)
    y = np.clip(y, info.tiny, 1.0 - info.epsneg)
    return make_result(y, (x,), lambda g: (g * y * (1.0 - y),))


def log(x, eps=0.0):
    """Natural log; with ``eps > 0`` the input is clamped below at ``eps``."""
    d = x.data
    if eps > 0:
        clamped = d < eps
        d = np.maximum(d, eps)
    else:
        clamped = None
    y = np.log(d)

    def back(g):
        gx = g / d
        if clamped is not None:
            gx = np.where(clamped, 0.0, gx).astype(g.dtype)
        return (gx,)

    return make_result(y, (x,), back)


def softplus(x):
    d = x.data
    y = np.logaddexp(0.0, d).astype(x.dtype)
    e = np.exp(-np.abs(d))
    sig = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return make_result(y, (x,), lambda g: (g * sig,))


# --- reductions and shape ---------------------------------------------------


def sum(x, axis=None, keepdims=False):  # noqa: A001 - mirrors numpy
    y = np.asarray(x.data.sum(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(y, (x,), back)


def mean(x, axis=None, keepdims=False):
    n = x.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    y = np.asarray(x.data.mean(axis=axis, keepdims=keepdims))

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, x.shape).astype(x.dtype),)

    return make_result(y, (x,), back)


def reshape(x, shape):
    y = x.data.reshape(shape)
    return make_result(y, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors, axis=-1):
    tensors = list(tensors)
    ax = axis % tensors[0].ndim
    for t in tensors[1:]:
        if t.ndim != tensors[0].ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(t.ndim) if i != ax
        ):
            raise ShapeMismatch(f"concat: {tensors[0].shape} vs {t.shape}")
    y = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax)
            for i in range(len(tensors))
        )

    return make_result(y, tensors, back)


# --- linear algebra ---------------------------------------------------------


def matmul(a, b):
    """``a @ b`` for a 1-D or 2-D ``a`` and a 2-D ``b``."""
    a, b = as_tensor(a, like=b if isinstance(b, Tensor) else None), as_tensor(b)
    if b.ndim != 2 or a.ndim not in (1, 2) or a.shape[-1] != b.shape[0]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    y = a.data @ b.data

    def back(g):
        if a.ndim == 1:
            return g @ b.data.T, np.outer(a.data, g)
        return g @ b.data.T, a.data.T @ g

    return make_result(y, (a, b), back)


def linear(x, weight, bias=None):
    y = matmul(x, weight)
    return y if bias is None else add(y, bias)


# --- normalization / regularization -----------------------------------------


def layer_norm(x, gamma=None, beta=None, eps=1e-5):
    """Normalize over the last dimension, then apply the optional affine map."""
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (xc * inv).astype(x.dtype)
    parents = [x]
    y = xhat
    if gamma is not None:
        parents.append(gamma)
        y = y * gamma.data
    if beta is not None:
        parents.append(beta)
        y = y + beta.data

    def back(g):
        gx_hat = g * gamma.data if gamma is not None else g
        n = d.shape[-1]
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        grads = [gx.astype(x.dtype)]
        if gamma is not None:
            grads.append(_unbroadcast(g * xhat, gamma.shape))
        if beta is not None:
            grads.append(_unbroadcast(g, beta.shape))
        return tuple(grads)

    return make_result(np.asarray(y, dtype=x.dtype), parents, back)


def dropout(x, p, training, rng=None):
    """Inverted dropout; identity when not training or ``p == 0``.

    ``rng`` is a ``numpy.random.Generator`` or an integer seed.
    """
    if not training or p == 0:
        return x
    if not 0 <= p < 1:
        raise ValueError("dropout p must be in [0, 1)")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= p).astype(x.dtype) / (1.0 - p)
    return make_result(x.data * mask, (x,), lambda g: (g * mask,))


# --- indexing and segment ops -----------------------------------------------


def embedding_lookup(table, ids):
    """Rows of ``table`` selected by integer ``ids`` (gather)."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch("embedding_lookup: id out of range")
    y = table.data[ids]

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)

    return make_result(y, (table,), back)


gather_rows = embedding_lookup


def _check_segments(ids, num_segments, length):
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != length:
        raise InvalidSegmentIds(f"need {length} segment ids, got shape {ids.shape}")
    if ids.size:
        if ids.min() < 0 or ids.max() >= num_segments:
            raise InvalidSegmentIds("segment id out of range")
        if np.any(ids[1:] < ids[:-1]):
            raise InvalidSegmentIds("segment ids must be non-decreasing")
    return ids


def segment_sum(values, segment_ids, num_segments):
    """Sum rows of ``values`` into ``num_segments`` buckets."""
    ids = _check_segments(segment_ids, num_segments, values.shape[0])
    y = np.zeros((num_segments,) + values.shape[1:], dtype=values.dtype)
    np.add.at(y, ids, values.data)
    return make_result(y, (values,), lambda g: (g[ids],))


def segment_softmax(scores, segment_ids, num_segments):
    """Softmax over rows sharing a segment id, column-wise for 2-D input."""
    ids = _check_segments(segment_ids, num_segments, scores.shape[0])
    d = scores.data
    seg_max = np.full((num_segments,) + d.shape[1:], -np.inf, dtype=d.dtype)
    np.maximum.at(seg_max, ids, d)
    e = np.exp(d - seg_max[ids])
    denom = np.zeros_like(seg_max)
    np.add.at(denom, ids, e)
    y = e / denom[ids]

    def back(g):
        gy = g * y
        seg = np.zeros_like(denom)
        np.add.at(seg, ids, gy)
        return (gy - y * seg[ids],)

    return make_result(y, (scores,), back)


# --- losses -----------------------------------------------------------------


def bce_with_logits(logits, targets):
    """Mean binary cross-entropy of ``sigmoid(logits)`` against 0/1 targets."""
    t = np.asarray(targets, dtype=logits.dtype)
    z = logits.data
    per = np.logaddexp(0.0, z) - t * z
    n = z.size
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    y = np.asarray(per.mean(), dtype=logits.dtype)
    return make_result(y, (logits,), lambda g: (((sig - t) * (g / n)).astype(logits.dtype),))
