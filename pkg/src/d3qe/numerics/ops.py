"""Differentiable operations on :class:`Tensor`.

Broadcasting is limited to what the model needs: elementwise ops broadcast
numpy-style, ``matmul`` accepts a 2-D right operand against any number of
leading batch dimensions, or two operands with identical batch dimensions.
"""

import numpy as np

from .. import kernels
from ..errors import DimensionError, NumericError
from .tensor import Tensor, as_tensor, make_node

LN_EPS = 1e-5


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _wrap(other, like):
    if isinstance(other, Tensor):
        return other
    return Tensor(np.asarray(other, dtype=like.dtype))


def add(a, b):
    a = as_tensor(a)
    b = _wrap(b, a)
    out = a.data + b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), backward)


def sub(a, b):
    a = as_tensor(a)
    b = _wrap(b, a)
    out = a.data - b.data

    def backward(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    b = _wrap(b, a)
    out = a.data * b.data

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return make_node(out, (a, b), backward)


def div(a, b):
    a = as_tensor(a)
    b = _wrap(b, a)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def scale(a, c: float):
    c = float(c)
    out = a.data * c
    return make_node(out, (a,), lambda g: (g * c,))


def exp(a):
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def matmul(a, b):
    """``a @ b``. 2-D ``b`` is shared across the leading dims of ``a``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs operands of rank >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    if b.ndim == 2:
        lead = a.shape[:-1]
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(*lead, b.shape[-1])

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return make_node(out, (a, b), backward)
    if a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return make_node(out, (a, b), backward)


def transpose(a):
    """Swap the last two axes."""
    out = np.swapaxes(a.data, -1, -2)
    return make_node(out, (a,), lambda g: (np.swapaxes(g, -1, -2),))


def reshape(a, shape):
    out = a.data.reshape(shape)
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),))


def sum_all(a):
    out = np.asarray(a.data.sum())
    return make_node(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a, axis):
    out = a.data.mean(axis=axis)
    n = a.shape[axis]

    def backward(g):
        g = np.expand_dims(g, axis) / a.dtype.type(n)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node(out, (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_node(out, tensors, backward)


def gather_rows(table, idx):
    """``table[idx]`` for a 2-D table and an integer index array of any shape."""
    idx = np.asarray(idx, dtype=np.int64)
    out = table.data[idx]

    def backward(g):
        flat = np.ascontiguousarray(g.reshape(-1, table.shape[1]))
        return (kernels.segment_sum(flat, idx.reshape(-1), table.shape[0]),)

    return make_node(out, (table,), backward)


def row_softmax(x):
    """Softmax over the last axis, stabilized by subtracting the row maximum."""
    if not np.all(np.isfinite(x.data)):
        raise NumericError("row_softmax received non-finite input")
    flat = np.ascontiguousarray(x.data.reshape(-1, x.shape[-1]))
    y = kernels.softmax_forward(flat)

    def backward(g):
        gf = np.ascontiguousarray(g.reshape(y.shape))
        return (kernels.softmax_backward(y, gf).reshape(x.shape),)

    return make_node(y.reshape(x.shape), (x,), backward)


def layer_norm(x, gain, bias, eps=LN_EPS):
    d = x.shape[-1]
    if d < 2:
        raise DimensionError("layer_norm needs at least 2 features")
    flat = np.ascontiguousarray(x.data.reshape(-1, d))
    y, xhat, rstd = kernels.layer_norm_forward(flat, gain.data, bias.data, eps)

    def backward(g):
        gf = np.ascontiguousarray(g.reshape(-1, d))
        dx, dgain, dbias = kernels.layer_norm_backward(gf, xhat, rstd, gain.data)
        return dx.reshape(x.shape), dgain, dbias

    return make_node(y.reshape(x.shape), (x, gain, bias), backward)


def gelu(x):
    xd = np.ascontiguousarray(x.data)
    out, t = kernels.gelu_forward(xd)
    return make_node(out, (x,), lambda g: (kernels.gelu_backward(xd, t, np.ascontiguousarray(g)),))


def bce_with_logits(logits, labels):
    """Mean binary cross-entropy; labels 1 = fake, 0 = real.

    Uses ``softplus(-s * z)`` with ``s = 2y - 1``, evaluated as
    ``max(t, 0) + log1p(exp(-|t|))`` so large logits never overflow.
    """
    y = np.asarray(labels, dtype=logits.dtype).reshape(logits.shape)
    sign = 2.0 * y - 1.0
    t = -sign * logits.data
    loss = np.maximum(t, 0) + np.log1p(np.exp(-np.abs(t)))
    out = np.asarray(loss.mean())
    if not np.isfinite(out):
        raise NumericError("loss is not finite")
    n = logits.data.size

    def backward(g):
        # d/dz softplus(-s z) = sigmoid(z) - y
        sig = np.where(logits.data >= 0,
                       1.0 / (1.0 + np.exp(-np.abs(logits.data))),
                       np.exp(-np.abs(logits.data)) / (1.0 + np.exp(-np.abs(logits.data))))
        return ((sig - y) * (g / n),)

    return make_node(out.astype(logits.dtype), (logits,), backward)
