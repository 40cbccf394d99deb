"""Discrepancy-aware transformer over the raster-ordered quantization residuals.

Attention logits get an additive term built from the per-token discrepancy
values: ``Q K^T / sqrt(d_k) + Q_D K_D^T / alpha`` with ``Q_D = MLP_q(delta)``,
``K_D = MLP_k(delta)`` and ``alpha = exp(a)``. Each token's scalar ``delta``
is the discrepancy entry of its own codebook index.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError, DimensionError, NumericError
from .numerics import ops
from .numerics.nn import MLP, LayerNorm, Module, uniform_init
from .numerics.rng import stream
from .numerics.tensor import Parameter, Tensor


@dataclass(frozen=True)
class D3ATConfig:
    layers: int = 2
    hidden: int = 512
    seq_len: int = 64
    latent_dim: int = 8
    use_distribution_bias: bool = True
    test_mode: bool = False  # permits layers == 0

    def __post_init__(self):
        min_layers = 0 if self.test_mode else 1
        if self.layers < min_layers:
            raise ConfigError(f"D3AT needs at least {min_layers} layer(s), got {self.layers}")
        if self.hidden < 8:
            raise ConfigError(f"hidden dim must be >= 8, got {self.hidden}")
        if self.seq_len < 1 or self.latent_dim < 1:
            raise ConfigError("sequence length and latent dim must be positive")

    @property
    def head_dim(self) -> int:
        return self.hidden


def sinusoidal_table(n, d):
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


class D3ATLayer(Module):
    def __init__(self, seed, prefix, d, use_bias, dtype=np.float32):
        def w(name, shape, fan_in):
            return Parameter(uniform_init(stream(seed, f"{prefix}/{name}"), shape, fan_in, dtype),
                             name=f"{prefix}/{name}")

        self.w_q = w("w_q", (d, d), d)
        self.w_k = w("w_k", (d, d), d)
        self.w_v = w("w_v", (d, d), d)
        self.w_out = w("w_out", (d, d), d)
        self.ln_attn = LayerNorm(d, dtype)
        self.ffn = MLP(stream(seed, f"{prefix}/ffn"), d, d, d, dtype)
        self.ln_ffn = LayerNorm(d, dtype)
        if use_bias:
            self.mlp_q = MLP(stream(seed, f"{prefix}/mlp_q"), 1, d, d, dtype)
            # an output bias on K_D would shift each logit row by a constant,
            # which softmax ignores; it is left out so no parameter is inert
            self.mlp_k = MLP(stream(seed, f"{prefix}/mlp_k"), 1, d, d, dtype, out_bias=False)
            self.log_alpha = Parameter(np.asarray(math.log(math.sqrt(d)), dtype=dtype),
                                       name=f"{prefix}/log_alpha")
        else:
            self.mlp_q = self.mlp_k = self.log_alpha = None

    @property
    def has_bias(self):
        return self.mlp_q is not None


class D3ATParams(Module):
    def __init__(self, config: D3ATConfig, seed: int, dtype=np.float32):
        self.config = config
        d = config.hidden
        self.input_proj = Parameter(
            uniform_init(stream(seed, "d3at/input_proj"), (config.latent_dim, d), config.latent_dim, dtype),
            name="d3at/input_proj")
        self.layers = [D3ATLayer(seed, f"d3at/layer{i}", d, config.use_distribution_bias, dtype)
                       for i in range(config.layers)]
        # fixed, not trained
        self.positional = sinusoidal_table(config.seq_len, d).astype(dtype)

    def named_parameters(self, prefix=""):
        out = [(prefix + "input_proj", self.input_proj)]
        for i, layer in enumerate(self.layers):
            out.extend(layer.named_parameters(f"{prefix}layers.{i}."))
        return out

    def cast(self, dtype):
        super().cast(dtype)
        self.positional = self.positional.astype(dtype)
        return self


def sequence_from_grid(error, indices):
    """Row-major flattening of an ``(h, w, c)`` residual grid and ``(h, w)`` index grid.

    Leading batch dims are kept.
    """
    error = np.asarray(error)
    indices = np.asarray(indices)
    if error.shape[:-1] != indices.shape:
        raise DimensionError(f"grid shapes differ: {error.shape[:-1]} vs {indices.shape}")
    lead = indices.shape[:-2]
    n = indices.shape[-2] * indices.shape[-1]
    return error.reshape(*lead, n, error.shape[-1]), indices.reshape(*lead, n)


def grid_from_sequence(seq, indices, h, w):
    lead = indices.shape[:-1]
    return seq.reshape(*lead, h, w, seq.shape[-1]), indices.reshape(*lead, h, w)


def token_discrepancy_gather(indices, delta):
    """Per-token discrepancy ``delta[indices[i]]`` with a trailing unit axis."""
    indices = np.asarray(indices)
    values = delta.values if hasattr(delta, "values") else np.asarray(delta)
    if indices.size and (indices.min() < 0 or indices.max() >= len(values)):
        raise DataError(f"token index outside [0, {len(values)})")
    return values[indices][..., None]


def _lift(delta_tok, mlp, dtype):
    # the MLP is evaluated once per distinct value, then broadcast back
    flat = np.asarray(delta_tok, dtype=np.float64).reshape(-1)
    uniq, inv = np.unique(flat, return_inverse=True)
    table = mlp(Tensor(uniq[:, None].astype(dtype)))
    return ops.gather_rows(table, inv.reshape(np.shape(delta_tok)[:-1]))


def distribution_bias(delta_tok, layer, dtype):
    """``Q_D K_D^T`` for the tokens in ``delta_tok`` (shape ``(..., n, 1)``)."""
    q_d = _lift(delta_tok, layer.mlp_q, dtype)
    k_d = _lift(delta_tok, layer.mlp_k, dtype)
    return ops.matmul(q_d, ops.transpose(k_d))


class EmbeddedInput:
    """First-layer input ``E @ W_in + P`` kept in factored form.

    ``E`` has only ``c`` channels, so ``(E @ W_in + P) @ W`` is evaluated as
    ``E @ (W_in @ W) + P @ W``. Same value, but the first layer's Q, K and
    value-output projections (and their gradients) become rank-``c``
    products instead of ``n x d x d`` ones.
    """

    def __init__(self, errors, w_in, positional):
        self.errors = errors
        self.w_in = w_in
        self.positional = positional
        self._dense = None

    def project(self, w):
        return ops.add(ops.matmul(self.errors, ops.matmul(self.w_in, w)),
                       ops.matmul(self.positional, w))

    def dense(self):
        if self._dense is None:
            self._dense = ops.add(ops.matmul(self.errors, self.w_in), self.positional)
        return self._dense


def _as_input(X):
    if isinstance(X, (Tensor, EmbeddedInput)):
        return X
    return Tensor(X)


def _project(X, w):
    return X.project(w) if isinstance(X, EmbeddedInput) else ops.matmul(X, w)


def _dense(X):
    return X.dense() if isinstance(X, EmbeddedInput) else X


def d3asa(X, delta_tok, layer: D3ATLayer, return_attention=False):
    """Discrepancy-aware single-head self-attention followed by the output projection."""
    X = _as_input(X)
    d_k = layer.w_q.shape[1]
    # One head, so Q K^T = X (W_q W_k^T) X^T and (A V) W_out = A X (W_v W_out).
    # Multiplying the d x d weights first replaces two n x d x d products per
    # pair with one.
    qk = _project(X, ops.matmul(layer.w_q, ops.transpose(layer.w_k)))
    logits = ops.scale(ops.matmul(qk, ops.transpose(_dense(X))), 1.0 / math.sqrt(d_k))
    if layer.has_bias:
        bias = distribution_bias(delta_tok, layer, layer.w_q.dtype)
        logits = ops.add(logits, ops.div(bias, ops.exp(layer.log_alpha)))
    attn = ops.row_softmax(logits)
    out = ops.matmul(attn, _project(X, ops.matmul(layer.w_v, layer.w_out)))
    if not np.all(np.isfinite(out.data)):
        raise NumericError("attention output is not finite")
    return (out, attn) if return_attention else out


def d3at_layer(X, delta_tok, layer: D3ATLayer):
    """``X^ = LN(D3ASA(X)) + X``; ``X' = LN(MLP(X^)) + X^``."""
    X = _as_input(X)
    x_hat = ops.add(layer.ln_attn(d3asa(X, delta_tok, layer)), _dense(X))
    return ops.add(layer.ln_ffn(layer.ffn(x_hat)), x_hat)


def embed_sequence(errors, params: D3ATParams, factored=False):
    """Input projection plus positional table; ``factored`` returns an :class:`EmbeddedInput`."""
    errors = np.asarray(errors)
    if errors.shape[-2:] != (params.config.seq_len, params.config.latent_dim):
        raise DimensionError(
            f"expected residual sequence (..., {params.config.seq_len}, {params.config.latent_dim}), "
            f"got {errors.shape}")
    e = Tensor(errors.astype(params.input_proj.dtype))
    pos = Tensor(params.positional)
    if factored:
        return EmbeddedInput(e, params.input_proj, pos)
    return ops.add(ops.matmul(e, params.input_proj), pos)


def d3at_forward(errors, indices, delta, params: D3ATParams):
    """Pooled discrete feature ``F_D`` (``(..., d)``) for residual sequences ``(..., n, c)``."""
    delta_tok = token_discrepancy_gather(indices, delta)
    X = embed_sequence(errors, params, factored=True)
    for layer in params.layers:
        X = d3at_layer(X, delta_tok, layer)
    return ops.mean(_dense(X), axis=-2)
