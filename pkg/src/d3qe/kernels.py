"""Hot inner loops, each in two flavours: a numba ``@njit`` kernel and a pure
numpy fallback.

The public names (``nearest_codebook``, ``layer_norm_forward`` ...) dispatch to
the numba flavour unless numba is missing or ``D3QE_DISABLE_NUMBA=1`` is set
in the environment before import. Both flavours stay importable as
``<name>_nb`` / ``<name>_np`` so tests and the benchmark can compare them.

Results agree between flavours to floating-point tolerance, not bitwise
(except ``nearest_codebook``, whose accumulation order is pinned). Within one
flavour every kernel is deterministic.
"""

import math
import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

HAVE_NUMBA = numba is not None
USE_NUMBA = HAVE_NUMBA and os.environ.get("D3QE_DISABLE_NUMBA", "").strip().lower() not in (
    "1", "true", "yes", "on")

_GELU_K = math.sqrt(2.0 / math.pi)
_GELU_C = 0.044715


def _njit(fn, reassoc=False):
    if not HAVE_NUMBA:
        return None
    # numpy error model: no per-division zero checks, so loops vectorize.
    # Row reductions may also reassociate their sums (still deterministic).
    fastmath = {"reassoc", "contract"} if reassoc else False
    return numba.njit(cache=True, nogil=True, error_model="numpy", fastmath=fastmath)(fn)


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# nearest codebook entry
#
# Squared distance accumulated channel by channel in float64, strict "<" so
# the lowest index wins ties. The numpy flavour reproduces the same order of
# operations, so both flavours return identical indices.

def _nearest_codebook_py(z, codebook):
    P, c = z.shape
    N = codebook.shape[0]
    out = np.empty(P, dtype=np.int64)
    for i in range(P):
        best = np.inf
        best_k = 0
        for k in range(N):
            d = 0.0
            for ch in range(c):
                t = z[i, ch] - codebook[k, ch]
                d += t * t
            if d < best:
                best = d
                best_k = k
        out[i] = best_k
    return out


nearest_codebook_nb = _njit(_nearest_codebook_py)


def nearest_codebook_np(z, codebook, chunk=4096):
    P, c = z.shape
    out = np.empty(P, dtype=np.int64)
    for s in range(0, P, chunk):
        zc = z[s:s + chunk]
        t = zc[:, None, 0] - codebook[None, :, 0]
        d = t * t
        for ch in range(1, c):
            t = zc[:, None, ch] - codebook[None, :, ch]
            d += t * t
        out[s:s + chunk] = np.argmin(d, axis=1)
    return out


# ---------------------------------------------------------------------------
# layer norm over the last axis of a 2-D array

def _layer_norm_forward_py(x, gain, bias, eps):
    n, d = x.shape
    y = np.empty_like(x)
    xhat = np.empty_like(x)
    rstd = np.empty(n, dtype=x.dtype)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        v = 0.0
        for j in range(d):
            t = x[i, j] - mu
            v += t * t
        r = 1.0 / math.sqrt(v / d + eps)
        rstd[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            y[i, j] = h * gain[j] + bias[j]
    return y, xhat, rstd


layer_norm_forward_nb = _njit(_layer_norm_forward_py, reassoc=True)


def layer_norm_forward_np(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _layer_norm_backward_py(dy, xhat, rstd, gain):
    n, d = dy.shape
    dx = np.empty_like(dy)
    dgain = np.zeros(d, dtype=np.float64)
    dbias = np.zeros(d, dtype=np.float64)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            g = dy[i, j] * gain[j]
            s1 += g
            s2 += g * xhat[i, j]
            dgain[j] += dy[i, j] * xhat[i, j]
            dbias[j] += dy[i, j]
        m1 = s1 / d
        m2 = s2 / d
        for j in range(d):
            dx[i, j] = rstd[i] * (dy[i, j] * gain[j] - m1 - xhat[i, j] * m2)
    return dx, dgain.astype(dy.dtype), dbias.astype(dy.dtype)


layer_norm_backward_nb = _njit(_layer_norm_backward_py, reassoc=True)


def layer_norm_backward_np(dy, xhat, rstd, gain):
    g = dy * gain
    m1 = g.mean(axis=-1, keepdims=True)
    m2 = (g * xhat).mean(axis=-1, keepdims=True)
    dx = rstd[:, None] * (g - m1 - xhat * m2)
    return dx, (dy * xhat).sum(axis=0), dy.sum(axis=0)


# ---------------------------------------------------------------------------
# row softmax (last axis of a 2-D array), max-subtracted

def _softmax_forward_py(x):
    n, m = x.shape
    y = np.empty_like(x)
    for i in range(n):
        mx = x[i, 0]
        for j in range(1, m):
            if x[i, j] > mx:
                mx = x[i, j]
        s = 0.0
        for j in range(m):
            e = math.exp(x[i, j] - mx)
            y[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(m):
            y[i, j] = y[i, j] * inv
    return y


softmax_forward_nb = _njit(_softmax_forward_py, reassoc=True)


def softmax_forward_np(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward_py(y, dy):
    n, m = y.shape
    dx = np.empty_like(y)
    for i in range(n):
        s = 0.0
        for j in range(m):
            s += dy[i, j] * y[i, j]
        for j in range(m):
            dx[i, j] = y[i, j] * (dy[i, j] - s)
    return dx


softmax_backward_nb = _njit(_softmax_backward_py, reassoc=True)


def softmax_backward_np(y, dy):
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


# ---------------------------------------------------------------------------
# GELU, tanh form, on flat arrays. ``t = tanh(u)`` comes from numpy in both
# flavours (its SIMD tanh beats a scalar loop) and is kept by the caller, so
# the backward pass is plain arithmetic.

def gelu_tanh(x):
    dt = x.dtype.type
    return np.tanh(dt(_GELU_K) * (x + dt(_GELU_C) * x * x * x))


def _gelu_forward_py(x, t):
    y = np.empty_like(x)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    for i in range(x.size):
        y[i] = half * x[i] * (one + t[i])
    return y


gelu_forward_nb = _njit(_gelu_forward_py)


def gelu_forward_np(x, t):
    dt = x.dtype.type
    return dt(0.5) * x * (dt(1.0) + t)


def _gelu_backward_py(x, t, dy):
    dx = np.empty_like(x)
    half = x.dtype.type(0.5)
    one = x.dtype.type(1.0)
    k = x.dtype.type(_GELU_K)
    c3 = x.dtype.type(3.0 * _GELU_C)
    for i in range(x.size):
        v = x[i]
        ti = t[i]
        dx[i] = dy[i] * (half * (one + ti) + half * v * (one - ti * ti) * k * (one + c3 * v * v))
    return dx


gelu_backward_nb = _njit(_gelu_backward_py)


def gelu_backward_np(x, t, dy):
    dt = x.dtype.type
    dinner = dt(_GELU_K) * (dt(1.0) + dt(3.0 * _GELU_C) * x * x)
    return dy * (dt(0.5) * (dt(1.0) + t) + dt(0.5) * x * (dt(1.0) - t * t) * dinner)


# ---------------------------------------------------------------------------
# AdamW update, in place on flat arrays:
# m <- b1 m + (1 - b1) g;  v <- b2 v + (1 - b2) g^2
# p <- p - lr * (m / bc1) / (sqrt(v / bc2) + eps) - lr * wd * p

def _adamw_update_py(p, g, m, v, lr, wd, beta1, beta2, bc1, bc2, eps):
    for i in range(p.size):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        pi = p[i]
        p[i] = pi - lr * ((mi / bc1) / (math.sqrt(vi / bc2) + eps)) - (lr * wd) * pi


adamw_update_nb = _njit(_adamw_update_py)


def adamw_update_np(p, g, m, v, lr, wd, beta1, beta2, bc1, bc2, eps):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    update = (m / bc1) / (np.sqrt(v / bc2) + eps)
    p[...] = p - lr * update - (lr * wd) * p


# ---------------------------------------------------------------------------
# scatter-add of rows: out[inv[i]] += values[i]

def _segment_sum_py(values, inv, n_out):
    out = np.zeros((n_out, values.shape[1]), dtype=values.dtype)
    for i in range(values.shape[0]):
        r = inv[i]
        for j in range(values.shape[1]):
            out[r, j] += values[i, j]
    return out


segment_sum_nb = _njit(_segment_sum_py)


def segment_sum_np(values, inv, n_out):
    out = np.zeros((n_out, values.shape[1]), dtype=values.dtype)
    np.add.at(out, inv, values)
    return out


# ---------------------------------------------------------------------------
# dispatch

def _pick(nb, np_fn):
    return nb if USE_NUMBA else np_fn


nearest_codebook = _pick(nearest_codebook_nb, nearest_codebook_np)
layer_norm_forward = _pick(layer_norm_forward_nb, layer_norm_forward_np)
layer_norm_backward = _pick(layer_norm_backward_nb, layer_norm_backward_np)
# numpy's SIMD exp beats numba's scalar libm exp on this row width, so the
# numpy flavour serves both modes (the numba kernel stays for comparison)
softmax_forward = softmax_forward_np
softmax_backward = _pick(softmax_backward_nb, softmax_backward_np)
segment_sum = _pick(segment_sum_nb, segment_sum_np)


adamw_update = _pick(adamw_update_nb, adamw_update_np)


def gelu_forward(x):
    """``(gelu(x), tanh(u))``; pass the second array back to :func:`gelu_backward`."""
    flat = x.reshape(-1)
    t = gelu_tanh(flat)
    fn = gelu_forward_nb if USE_NUMBA else gelu_forward_np
    return fn(flat, t).reshape(x.shape), t


def gelu_backward(x, t, dy):
    fn = gelu_backward_nb if USE_NUMBA else gelu_backward_np
    return fn(x.reshape(-1), t, dy.reshape(-1)).reshape(x.shape)
