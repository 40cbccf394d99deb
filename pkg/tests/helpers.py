"""Shared builders and independent oracles for the test suite."""

import math

import numpy as np


def tiny_model(seed=0, n_codes=16, channels=4, patch=4, side=16, hidden=32, layers=2,
               d_s=12, d_e=8, bias=True, dtype=np.float32, width=None):
    """A DetectorModel small enough for finite-difference checks."""
    width = side if width is None else width
    from d3qe.data import SyntheticDataSpec, build_synthetic_tokenizer
    from d3qe.detector import DetectorModel, ModelConfig, SemanticProvider

    spec = SyntheticDataSpec(num_codes=n_codes, channels=channels, patch_size=patch, height=side,
                             width=width, top_k=max(1, n_codes // 8), radius_min=0.2, radius_max=3.0,
                             n_train=0, n_val=0, n_test=0)
    tok = build_synthetic_tokenizer(seed, spec)
    cfg = ModelConfig(num_codes=n_codes, channels=channels, patch_size=patch, height=side, width=width,
                      hidden=hidden, layers=layers, semantic_dim=d_s, embed_dim=d_e,
                      use_distribution_bias=bias, seed=seed)
    provider = SemanticProvider.random_projection(seed, d_s)
    model = DetectorModel(cfg, tok.encoder, tok.codebook, provider)
    if dtype != np.float32:
        model.cast(dtype)
    return model, tok, spec


def full_loss_gradcheck(seed=0, max_coords=24, details=None):
    """Finite-difference check of the complete training loss in float64.

    n = 8 tokens (8x16 image, 4x4 patches), d = 32, N = 16, batch of 2
    images decoded from distinct random tokens so the discrepancy bias
    varies within every attention row. Returns ``(worst, per_parameter,
    loss_value)``.
    """
    from d3qe.data import decode_tokens
    from d3qe.detector import batch_logits, bce_loss
    from d3qe.numerics import parameter_gradient_check, stream
    from d3qe.vq import DiscrepancyVector

    model, tok, _ = tiny_model(seed=seed, n_codes=16, channels=4, patch=4, side=8, width=16, hidden=32,
                               layers=2, d_s=12, d_e=8, dtype=np.float64)
    assert model.config.seq_len == 8 and model.config.hidden == 32
    rng = stream(seed, "test/full-gradcheck")
    v = rng.uniform(-0.9, 0.9, 16)
    model.set_snapshot(DiscrepancyVector(v - v.mean()))
    tokens = np.stack([rng.permutation(16)[:8].reshape(2, 4) for _ in range(2)])
    images = decode_tokens(tokens, tok)
    labels = np.array([0, 1])

    def loss():
        return bce_loss(batch_logits(images, None, model), labels)

    worst, per = parameter_gradient_check(loss, model.named_parameters(), max_coords=max_coords, rng=rng,
                                          details=details)
    return worst, per, loss().item()


# --- independent oracles -------------------------------------------------

def exhaustive_argmin(z, entries):
    """Plain loop over every entry; first strict improvement wins."""
    out = []
    for v in z.astype(np.float64):
        best, best_d = 0, np.inf
        for k, e in enumerate(entries.astype(np.float64)):
            d = sum((a - b) ** 2 for a, b in zip(v, e))
            if d < best_d:
                best, best_d = k, d
        out.append(best)
    return np.array(out)


def make_params(seed=0, layers=1, d=16, n=8, c=4, bias=True, dtype=np.float64, test_mode=False):
    """Bare D3AT parameters (float64 by default) for attention-level checks."""
    from d3qe.d3at import D3ATConfig, D3ATParams

    cfg = D3ATConfig(layers=layers, hidden=d, seq_len=n, latent_dim=c, use_distribution_bias=bias,
                     test_mode=test_mode)
    return D3ATParams(cfg, seed, dtype)


def vanilla_attention(x, wq, wk, wv, wo):
    """Textbook single-head scaled dot-product attention, independent of the library."""
    q, k, v = x @ wq, x @ wk, x @ wv
    logits = q @ k.T / math.sqrt(wq.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    return p @ v @ wo


def brute_force_ap(scores, labels):
    """Enumerate every cut of the stable descending ranking; AP is the mean
    precision over the cuts that end on a positive."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(labels)
    total = 0.0
    for cut in range(1, len(order) + 1):
        top = order[:cut]
        if labels[top[-1]] == 1:
            total += sum(labels[i] for i in top) / cut
    return total / n_pos


# --- acceptance registry ---------------------------------------------------

ACCEPTANCE = []


def record(criterion, ok, detail):
    """Store one acceptance line; ``ok`` is a bool or a literal status string."""
    status = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
    ACCEPTANCE.append((criterion, status, detail))
