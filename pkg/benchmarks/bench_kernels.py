"""Time the numba and pure-numpy flavours of every hot kernel.

Shapes follow the default model: 32 images x 64 tokens, hidden width 512,
a 512-entry codebook with 8 channels, and about 3.5M AdamW parameters.

    python benchmarks/bench_kernels.py --repeat 20
"""

import argparse
import time

import numpy as np

from d3qe import kernels


def best_of(fn, args, repeat):
    fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])  # warm-up / JIT compile
    times = []
    for _ in range(repeat):
        fresh = [a.copy() if isinstance(a, np.ndarray) else a for a in args]
        start = time.perf_counter()
        fn(*fresh)
        times.append(time.perf_counter() - start)
    return min(times)


def cases(rng, rows, width, n_codes, channels, n_params):
    x = rng.standard_normal((rows, width)).astype(np.float32)
    gain = np.ones(width, np.float32)
    bias = np.zeros(width, np.float32)
    _, xhat, rstd = kernels.layer_norm_forward_np(x, gain, bias, 1e-5)
    logits = rng.standard_normal((rows, 64)).astype(np.float32)
    probs = kernels.softmax_forward_np(logits)
    flat = x.reshape(-1)
    t = kernels.gelu_tanh(flat)
    p = rng.standard_normal(n_params).astype(np.float32)
    g = (1e-3 * rng.standard_normal(n_params)).astype(np.float32)
    z = rng.standard_normal((rows, channels))
    codebook = 3.0 * rng.standard_normal((n_codes, channels))
    inv = rng.integers(0, 64, rows)
    return {
        "nearest_codebook": ((z, codebook), kernels.nearest_codebook_nb, kernels.nearest_codebook_np),
        "layer_norm_forward": ((x, gain, bias, 1e-5), kernels.layer_norm_forward_nb,
                               kernels.layer_norm_forward_np),
        "layer_norm_backward": ((x, xhat, rstd, gain), kernels.layer_norm_backward_nb,
                                kernels.layer_norm_backward_np),
        "softmax_forward": ((logits,), kernels.softmax_forward_nb, kernels.softmax_forward_np),
        "softmax_backward": ((probs, logits), kernels.softmax_backward_nb, kernels.softmax_backward_np),
        "gelu_forward": ((flat, t), kernels.gelu_forward_nb, kernels.gelu_forward_np),
        "gelu_backward": ((flat, t, flat), kernels.gelu_backward_nb, kernels.gelu_backward_np),
        "adamw_update": ((p, g, np.zeros_like(p), np.zeros_like(p), 1e-4, 0.01, 0.9, 0.999, 0.1, 0.001, 1e-8),
                         kernels.adamw_update_nb, kernels.adamw_update_np),
        "segment_sum": ((x, inv, 64), kernels.segment_sum_nb, kernels.segment_sum_np),
    }


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=10, help="timed runs per kernel (best is reported)")
    parser.add_argument("--rows", type=int, default=32 * 64)
    parser.add_argument("--width", type=int, default=512)
    parser.add_argument("--codes", type=int, default=512)
    parser.add_argument("--channels", type=int, default=8)
    parser.add_argument("--params", type=int, default=3_500_000)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args(argv)
    if not kernels.HAVE_NUMBA:
        parser.error("numba is not installed; only the numpy flavour is available")

    table = cases(np.random.default_rng(args.seed), args.rows, args.width, args.codes, args.channels,
                  args.params)
    print(f"{'kernel':22s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (call_args, nb, np_fn) in table.items():
        t_nb = best_of(nb, call_args, args.repeat)
        t_np = best_of(np_fn, call_args, args.repeat)
        print(f"{name:22s} {1e3 * t_nb:10.3f} {1e3 * t_np:10.3f} {t_np / t_nb:8.2f}x")


if __name__ == "__main__":
    main()
