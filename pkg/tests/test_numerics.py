import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from d3qe.errors import DimensionError, NumericError
from d3qe.numerics import (
    MLP,
    Parameter,
    Tensor,
    adamw_step,
    gradient_check,
    layer_norm,
    matmul,
    mlp_forward,
    no_grad,
    ops,
    row_softmax,
    stream,
    sum_all,
)

# frozen from a 50-digit mpmath evaluation of exp(k) / (e + e^2 + e^3)
SOFTMAX_123 = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219]


def triple_loop(a, b):
    m, k = a.shape
    p = b.shape[1]
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            out[i, j] = s
    return out


# --- matmul ---------------------------------------------------------------

def test_matmul_identity_and_projector():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), b).data, b)
    proj = np.array([[1.0, 0.0], [0.0, 0.0]])
    np.testing.assert_array_equal(matmul(proj, [[5.0, 6.0], [7.0, 8.0]]).data, [[5, 6], [0, 0]])


def test_matmul_matches_triple_loop(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    np.testing.assert_allclose(matmul(a, b).data, triple_loop(a, b), rtol=1e-12)
    for _ in range(20):
        a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
        ref = triple_loop(a, b)
        assert np.max(np.abs(matmul(a, b).data - ref) / np.maximum(np.abs(ref), 1e-12)) < 1e-6


def test_matmul_batched_shared_weight(rng):
    x, w = rng.standard_normal((2, 3, 5)), rng.standard_normal((5, 4))
    out = matmul(x, w).data
    for i in range(2):
        np.testing.assert_allclose(out[i], triple_loop(x[i], w), rtol=1e-12)


def test_matmul_shape_errors():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))
    with pytest.raises(DimensionError):
        matmul(np.ones(3), np.ones((3, 1)))
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 2, 3)), np.ones((3, 3, 1)))


# --- softmax --------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(row_softmax(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]], atol=1e-15)
    for c in (-50.0, 0.0, 3.5, 700.0):
        np.testing.assert_allclose(row_softmax(Tensor([[c, c, c]])).data, [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_allclose(row_softmax(Tensor([[1.0, 2.0, 3.0]])).data[0], SOFTMAX_123, atol=1e-5)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        row_softmax(Tensor([[0.0, np.nan]]))


@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=12),
                  elements=st.floats(-30, 30)),
       st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = row_softmax(Tensor(x)).data
    assert np.all(y >= 0)
    np.testing.assert_allclose(y.sum(axis=1), 1.0, atol=1e-6)
    shifted = row_softmax(Tensor(x + c)).data
    assert np.max(np.abs(shifted - y)) < 1e-6


def test_softmax_large_logits_do_not_overflow():
    y = row_softmax(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(y).all() and y[0, 0] == 1.0


# --- layer norm -----------------------------------------------------------

def test_layer_norm_examples(rng):
    ones, zeros = Tensor(np.ones(4)), Tensor(np.zeros(4))
    np.testing.assert_array_equal(layer_norm(Tensor(np.full((1, 4), 7.0)), ones, zeros).data, 0.0)
    out = layer_norm(Tensor([[1.0, 3.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[-1.0, 1.0]], atol=1e-4)
    x = rng.standard_normal((20, 6)) * 3 + 2
    bias = rng.standard_normal(6)
    y = layer_norm(Tensor(x), Tensor(np.full(6, 1.7)), Tensor(bias)).data
    np.testing.assert_allclose(y.mean(axis=1), bias.mean(), atol=1e-9)


def test_layer_norm_needs_two_features():
    with pytest.raises(DimensionError):
        layer_norm(Tensor(np.ones((2, 1))), Tensor(np.ones(1)), Tensor(np.zeros(1)))


# --- MLP ------------------------------------------------------------------

def _gelu_ref(v):
    return 0.5 * v * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (v + 0.044715 * v ** 3)))


def test_mlp_zero_and_identity():
    mlp = MLP(np.random.default_rng(0), 3, 3, 3, np.float64)
    for p in mlp.parameters():
        p.data[...] = 0.0
    np.testing.assert_array_equal(mlp_forward(Tensor(np.ones((2, 3))), mlp).data, 0.0)
    mlp.fc1.weight.data[...] = np.eye(3)
    mlp.fc2.weight.data[...] = np.eye(3)
    np.testing.assert_array_equal(mlp_forward(Tensor(np.zeros((1, 3))), mlp).data, 0.0)


def test_mlp_matches_straight_line_oracle(rng):
    mlp = MLP(rng, 5, 7, 3, np.float64)
    x = rng.standard_normal((4, 5))
    w1, b1 = mlp.fc1.weight.data, mlp.fc1.bias.data
    w2, b2 = mlp.fc2.weight.data, mlp.fc2.bias.data
    ref = np.zeros((4, 3))
    for i in range(4):
        h = [_gelu_ref(sum(x[i, t] * w1[t, j] for t in range(5)) + b1[j]) for j in range(7)]
        for k in range(3):
            ref[i, k] = sum(h[j] * w2[j, k] for j in range(7)) + b2[k]
    np.testing.assert_allclose(mlp_forward(Tensor(x), mlp).data, ref, rtol=1e-12, atol=1e-14)


def test_mlp_shape_mismatch():
    mlp = MLP(np.random.default_rng(0), 3, 4, 2)
    with pytest.raises(DimensionError):
        mlp_forward(Tensor(np.ones((1, 4), np.float32)), mlp)


# --- AdamW ----------------------------------------------------------------

def test_adamw_zero_grad_is_identity_bit_exact(rng):
    p = Parameter(rng.standard_normal(17).astype(np.float32))
    before = p.data.copy()
    p.grad = np.zeros_like(p.data)
    for _ in range(3):
        adamw_step([p], lr=0.1, wd=0.0)
    assert p.data.tobytes() == before.tobytes()


def test_adamw_pure_decay():
    p = Parameter(np.array([2.0, -4.0]))
    p.grad = np.zeros(2)
    adamw_step([p], lr=0.1, wd=0.01)
    np.testing.assert_allclose(p.data, [2.0 * 0.999, -4.0 * 0.999], rtol=1e-15)


def scalar_adam(value, grads, lr, wd, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        value = value - lr * m_hat / (math.sqrt(v_hat) + eps) - lr * wd * value
    return value


def test_adamw_matches_scalar_oracle():
    # one step with constant g: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    p = Parameter(np.array([0.5]))
    p.grad = np.array([0.3])
    adamw_step([p], lr=0.01, wd=0.01)
    assert p.data[0] == pytest.approx(0.5 - 0.01 * 0.3 / (0.3 + 1e-8) - 0.01 * 0.01 * 0.5, rel=1e-14)
    grads = [0.3, -1.2, 0.05, 2.0, -0.7]
    p = Parameter(np.array([0.5]))
    for g in grads:
        p.grad = np.array([g])
        adamw_step([p], lr=0.05, wd=0.1)
    assert p.data[0] == pytest.approx(scalar_adam(0.5, grads, 0.05, 0.1), rel=1e-13)


def test_adamw_rejects_non_finite_before_touching_anything():
    a, b = Parameter(np.ones(2)), Parameter(np.ones(2))
    a.grad = np.ones(2)
    b.grad = np.array([1.0, np.inf])
    with pytest.raises(NumericError):
        adamw_step([a, b], lr=0.1, wd=0.0)
    np.testing.assert_array_equal(a.data, 1.0)
    assert a.step == 0


def test_parameter_moments_start_at_zero():
    p = Parameter(np.ones((2, 3)))
    assert not p.m.any() and not p.v.any() and p.step == 0


# --- gradient checking ----------------------------------------------------

def test_gradient_check_sum_of_squares(rng):
    # away from 0 (near 0 the true gradient sinks below finite-difference noise)
    for _ in range(5):
        x = rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], size=(3, 4))
        assert gradient_check(lambda t: sum_all(t * t), x) < 1e-9


@pytest.mark.xfail(strict=True, reason="true gradient is 0: central-difference rounding (~1e-11) "
                   "over the 1e-8 relative-error floor cannot get below 1e-7")
def test_gradient_check_softmax_sum_relative(rng):
    x = rng.standard_normal((3, 5))
    assert gradient_check(lambda t: sum_all(row_softmax(t)), x) < 1e-7


def test_gradient_check_softmax_sum_absolute(rng):
    x = rng.standard_normal((3, 5))
    t = Tensor(x, requires_grad=True)
    sum_all(row_softmax(t)).backward()
    assert np.max(np.abs(t.grad)) < 1e-15
    h = 1e-5
    worst = 0.0
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        fd = (row_softmax(Tensor(xp)).data.sum() - row_softmax(Tensor(xm)).data.sum()) / (2 * h)
        worst = max(worst, abs(fd))
    assert worst < 1e-9


def _weighted(op, w):
    return lambda t: sum_all(op(t) * Tensor(w))


OPS = {
    "add": (lambda r: (r.standard_normal((3, 4)),), lambda c: (lambda t: ops.add(t, Tensor(c)))),
    "sub": (lambda r: (r.standard_normal((3, 4)),), lambda c: (lambda t: ops.sub(Tensor(c), t))),
    "mul": (lambda r: (r.standard_normal((3, 4)),), lambda c: (lambda t: ops.mul(t, Tensor(c)))),
    "div": (lambda r: (r.uniform(1, 2, (3, 4)),), lambda c: (lambda t: ops.div(Tensor(c), ops.add(ops.mul(t, t), 1.0)))),
    "exp": (lambda r: (None,), lambda c: ops.exp),
    "scale": (lambda r: (None,), lambda c: (lambda t: ops.scale(t, -2.5))),
    "matmul_left": (lambda r: (r.standard_normal((4, 2)),), lambda c: (lambda t: ops.matmul(t, Tensor(c)))),
    "matmul_right": (lambda r: (r.standard_normal((5, 3)),), lambda c: (lambda t: ops.matmul(Tensor(c), ops.reshape(t, (3, 4))))),
    "transpose": (lambda r: (None,), lambda c: (lambda t: ops.transpose(t))),
    "mean": (lambda r: (None,), lambda c: (lambda t: ops.mean(t, axis=0))),
    "concat": (lambda r: (r.standard_normal((3, 2)),), lambda c: (lambda t: ops.concat([t, Tensor(c)], axis=1))),
    "gather_rows": (lambda r: (np.array([2, 0, 2, 1]),), lambda c: (lambda t: ops.gather_rows(t, c))),
    "row_softmax": (lambda r: (None,), lambda c: ops.row_softmax),
    "layer_norm": (lambda r: (r.standard_normal(4), r.standard_normal(4)),
                   lambda c: (lambda t: ops.layer_norm(t, Tensor(c[0]), Tensor(c[1])))),
    "gelu": (lambda r: (None,), lambda c: ops.gelu),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_every_op_passes_gradient_check(name):
    rng = stream(1, f"test/gradcheck/{name}")
    make_const, make_op = OPS[name]
    for _ in range(3):
        const = make_const(rng)
        op = make_op(const if len(const) > 1 else const[0])
        x = rng.standard_normal((3, 4))
        w = rng.standard_normal(np.shape(op(Tensor(x)).data))
        assert gradient_check(_weighted(op, w), x) < 1e-4


def test_bce_gradient_check(rng):
    y = np.array([0, 1, 1, 0, 1])
    assert gradient_check(lambda t: ops.bce_with_logits(t, y), rng.standard_normal(5) * 3) < 1e-4


def test_batched_matmul_gradient_check(rng):
    b = rng.standard_normal((2, 4, 3))
    assert gradient_check(_weighted(lambda t: ops.matmul(t, Tensor(b)), rng.standard_normal((2, 5, 3))),
                          rng.standard_normal((2, 5, 4))) < 1e-4


def test_no_grad_records_nothing():
    p = Parameter(np.ones(3))
    with no_grad():
        out = sum_all(p * p)
    assert not out.requires_grad and out._backward is None


def test_backward_accumulates_shared_parents():
    p = Parameter(np.array([3.0]))
    sum_all(p * p + p).backward()
    np.testing.assert_allclose(p.grad, [7.0])


def test_named_streams_are_independent_and_reproducible():
    a = stream(5, "x").standard_normal(4)
    np.testing.assert_array_equal(a, stream(5, "x").standard_normal(4))
    assert not np.array_equal(a, stream(5, "y").standard_normal(4))
    assert not np.array_equal(a, stream(6, "x").standard_normal(4))
