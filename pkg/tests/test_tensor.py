"""Engine tests: forward oracles, backward rules, finite policy."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ceglab.tensor import (
    DegenerateRowError,
    GradientError,
    NonFiniteError,
    Tape,
    Tensor,
    add,
    backward,
    cross_entropy,
    gelu,
    grad_check,
    layer_norm,
    matmul,
    mul,
    softmax_rows,
    tsum,
)


def _rng(seed=0):
    return np.random.default_rng(seed)


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(a, b).data, [[1, 2], [3, 4]])


def test_matmul_projector():
    p = Tensor([[1.0, 0.0], [0.0, 0.0]])
    b = Tensor([[5.0, 6.0], [7.0, 8.0]])
    np.testing.assert_array_equal(matmul(p, b).data, [[5, 6], [0, 0]])


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum_is_ones_bt():
    # d(sum(A@B))/dA = ones(m,n) @ B^T; cross-checked by central differences
    rng = _rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    b_data = rng.normal(size=(4, 2))
    b = Tensor(b_data, dtype=np.float64)
    with Tape() as tape:
        loss = tsum(matmul(a, b))
        tape.backward(loss)
    expected = np.ones((3, 2)) @ b_data.T
    np.testing.assert_allclose(a.grad, expected, atol=1e-12)

    a2 = Tensor(rng.normal(size=(3, 4)), requires_grad=True, dtype=np.float64)
    err = grad_check(lambda t: tsum(matmul(t, b)), a2, samples=12, h=1e-4)
    assert err < 1e-8


def test_matmul_batched_broadcast_grads():
    # K with a size-1 group axis (the MQA layout) accumulates over the group
    rng = _rng(2)
    q = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True, dtype=np.float64)
    k = Tensor(rng.normal(size=(2, 1, 5, 4)), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        loss = tsum(matmul(q, k))
        tape.backward(loss)
    assert q.grad.shape == (2, 3, 4, 5)
    assert k.grad.shape == (2, 1, 5, 4)
    manual = np.zeros((2, 1, 5, 4))
    g = np.ones((2, 3, 4, 4))
    for i in range(3):
        manual[:, 0] += np.swapaxes(q.data[:, i], -1, -2) @ g[:, i]
    np.testing.assert_allclose(k.grad, manual, atol=1e-12)


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------


def test_softmax_uniform_row():
    out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
    np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-7)


def test_softmax_large_values_stable():
    out = softmax_rows(Tensor([[1000.0, 0.0]]))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data[0, 0], 1.0, atol=1e-6)


def test_softmax_masked_row():
    # row [1,2,3], last entry masked -> [e^1, e^2]/(e^1+e^2), 0
    mask = np.array([[True, True, False]])
    out = softmax_rows(Tensor([[1.0, 2.0, 3.0]]), mask)
    e1, e2 = math.e, math.e**2
    np.testing.assert_allclose(out.data, [[e1 / (e1 + e2), e2 / (e1 + e2), 0.0]], atol=1e-7)


def test_softmax_fully_masked_row_raises():
    with pytest.raises(DegenerateRowError):
        softmax_rows(Tensor([[1.0, 2.0]]), np.array([[False, False]]))


def test_softmax_masked_entries_exactly_zero():
    rng = _rng(3)
    x = Tensor(rng.normal(size=(4, 6)))
    mask = rng.random((4, 6)) > 0.4
    mask[:, 0] = True
    out = softmax_rows(x, mask).data
    assert (out[~mask] == 0.0).all()
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(2, 8), st.integers(0, 1000))
def test_softmax_rows_sum_to_one(m, n, seed):
    x = Tensor(_rng(seed).normal(scale=5.0, size=(m, n)))
    np.testing.assert_allclose(softmax_rows(x).data.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_gradient():
    x = Tensor(_rng(4).normal(size=(3, 5)), requires_grad=True, dtype=np.float64)
    w = Tensor(_rng(5).normal(size=(3, 5)), dtype=np.float64)
    err = grad_check(lambda t: tsum(mul(softmax_rows(t), w)), x, samples=15, h=1e-5)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# cross entropy
# ---------------------------------------------------------------------------


def test_cross_entropy_uniform_is_log_vocab():
    vocab = 11
    logits = Tensor(np.zeros((4, vocab)))
    loss = cross_entropy(logits, np.array([0, 3, 7, 10]))
    assert abs(loss.item() - math.log(vocab)) < 1e-6


def test_cross_entropy_confident_is_near_zero():
    logits = np.zeros((2, 5), dtype=np.float32)
    logits[0, 2] = 100.0
    logits[1, 4] = 100.0
    loss = cross_entropy(Tensor(logits), np.array([2, 4]))
    assert loss.item() < 1e-6


def test_cross_entropy_matches_direct_summation():
    # independent oracle: explicit per-row probability normalization in float64
    rng = _rng(6)
    logits = rng.normal(size=(4, 10))
    targets = rng.integers(0, 10, size=4)

    def oracle(lg, tg):
        total = 0.0
        for row, t in zip(lg, tg):
            p = np.exp(row - row.max())
            p = p / p.sum()
            total += -math.log(p[t])
        return total / len(tg)

    loss = cross_entropy(Tensor(logits, dtype=np.float64), targets)
    assert abs(loss.item() - oracle(logits, targets)) < 1e-6


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 4))), np.array([0, 4]))


def test_cross_entropy_gradient():
    logits = Tensor(_rng(7).normal(size=(6, 9)), requires_grad=True, dtype=np.float64)
    targets = _rng(8).integers(0, 9, size=6)
    err = grad_check(lambda t: cross_entropy(t, targets), logits, samples=20, h=1e-5)
    assert err < 1e-7


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------


def _ln_unit(d):
    return Tensor(np.ones(d)), Tensor(np.zeros(d))


def test_layer_norm_constant_row_is_zero():
    g, b = _ln_unit(4)
    out = layer_norm(Tensor([[3.0, 3.0, 3.0, 3.0]]), g, b)
    np.testing.assert_allclose(out.data, 0.0, atol=1e-5)


def test_layer_norm_already_standardized():
    g, b = _ln_unit(2)
    out = layer_norm(Tensor([[1.0, -1.0]]), g, b)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-4)


def test_layer_norm_matches_two_pass_oracle():
    rng = _rng(9)
    x = rng.normal(size=(3, 8))
    gain = rng.normal(size=8)
    bias = rng.normal(size=8)
    out = layer_norm(Tensor(x, dtype=np.float64), Tensor(gain, dtype=np.float64),
                     Tensor(bias, dtype=np.float64), eps=1e-5)
    expected = np.empty_like(x)
    for i in range(3):
        mu = x[i].mean()
        var = ((x[i] - mu) ** 2).mean()
        expected[i] = (x[i] - mu) / math.sqrt(var + 1e-5) * gain + bias
    np.testing.assert_allclose(out.data, expected, atol=1e-6)


def test_layer_norm_gradient():
    rng = _rng(10)
    x = Tensor(rng.normal(size=(4, 6)), requires_grad=True, dtype=np.float64)
    gain = Tensor(rng.normal(size=6), requires_grad=True, dtype=np.float64)
    bias = Tensor(rng.normal(size=6), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(4, 6)), dtype=np.float64)

    err = grad_check(lambda t: tsum(mul(layer_norm(t, gain, bias), w)), x, samples=20, h=1e-5)
    assert err < 1e-5
    err = grad_check(lambda t: tsum(mul(layer_norm(x, t, bias), w)), gain, samples=6, h=1e-5)
    assert err < 1e-6


# ---------------------------------------------------------------------------
# backward machinery
# ---------------------------------------------------------------------------


def test_backward_non_scalar_root_rejected():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        y = add(x, x)
        with pytest.raises(GradientError):
            tape.backward(y)


def test_backward_foreign_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    loose = Tensor(np.asarray(1.0))
    with Tape() as tape:
        tsum(x)
        with pytest.raises(GradientError):
            backward(loose, tape)


def test_backward_accumulates_over_paths():
    # y = x*x used twice: dy/dx of (x*x + x*x) = 4x
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        sq = mul(x, x)
        loss = tsum(add(sq, sq))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, 4 * x.data, atol=1e-12)


def test_residual_add_gradient_not_aliased():
    # both branches of an add keep independent gradients downstream
    x = Tensor(np.array([[1.0, 2.0]]), requires_grad=True, dtype=np.float64)
    w = Tensor(np.array([[2.0, 0.0], [0.0, 3.0]]), requires_grad=True, dtype=np.float64)
    with Tape() as tape:
        h = matmul(x, w)
        out = add(h, x)  # residual
        loss = tsum(out)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, np.ones((1, 2)) @ w.data.T + 1.0, atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(
    st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3),
    st.floats(-3, 3).filter(lambda v: abs(v) > 1e-3),
    st.integers(0, 10**6),
)
def test_backward_linearity(a, b, seed):
    # grad of a*f + b*g == a*grad(f) + b*grad(g) within 1e-10
    rng = _rng(seed)
    x_data = rng.normal(size=(3, 3))
    w = Tensor(rng.normal(size=(3, 3)), dtype=np.float64)

    def run(fn):
        x = Tensor(x_data, requires_grad=True, dtype=np.float64)
        with Tape() as tape:
            tape.backward(fn(x))
        return x.grad

    f = lambda x: tsum(matmul(x, w))
    g = lambda x: tsum(mul(x, x))
    combined = run(lambda x: add(f(x) * a, g(x) * b))
    separate = a * run(f) + b * run(g)
    np.testing.assert_allclose(combined, separate, atol=1e-10)


def test_grad_check_polynomial():
    # f = sum of squares at [1,2,3]: analytic gradient [2,4,6]
    x = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True, dtype=np.float64)
    err = grad_check(lambda t: tsum(mul(t, t)), x, samples=3, h=1e-5)
    assert err < 1e-6
    x.zero_grad()
    with Tape() as tape:
        tape.backward(tsum(mul(x, x)))
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], atol=1e-10)


def test_gelu_gradient():
    x = Tensor(_rng(11).normal(size=(5, 4)), requires_grad=True, dtype=np.float64)
    err = grad_check(lambda t: tsum(gelu(t)), x, samples=15, h=1e-5)
    assert err < 1e-7


def test_gelu_known_values():
    # GELU(0) = 0; GELU(x) ~ x for large positive x; odd-ish decay for negatives
    out = gelu(Tensor(np.array([0.0, 10.0, -10.0]), dtype=np.float64))
    np.testing.assert_allclose(out.data, [0.0, 10.0, 0.0], atol=1e-4)


# ---------------------------------------------------------------------------
# finite policy
# ---------------------------------------------------------------------------


def test_non_finite_input_rejected():
    with pytest.raises(NonFiniteError):
        Tensor(np.array([1.0, np.inf]))


def test_non_finite_op_output_rejected():
    big = Tensor(np.full((2, 2), 1e20, dtype=np.float32))
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        matmul(mul(big, big), big)


def test_determinism_bit_identical():
    rng = _rng(12)
    x_data = rng.normal(size=(16, 16)).astype(np.float32)
    w_data = rng.normal(size=(16, 16)).astype(np.float32)

    def run():
        x = Tensor(x_data.copy(), requires_grad=True)
        with Tape() as tape:
            loss = tsum(gelu(matmul(x, Tensor(w_data.copy()))))
            tape.backward(loss)
        return loss.item(), x.grad.tobytes()

    assert run() == run()


def test_softmax_masked_gradient():
    rng = _rng(20)
    x = Tensor(rng.normal(size=(3, 6)), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=(3, 6)), dtype=np.float64)
    mask = rng.random((3, 6)) > 0.4
    mask[:, 0] = True
    err = grad_check(lambda t: tsum(mul(softmax_rows(t, mask), w)), x, samples=15, h=1e-5)
    assert err < 1e-6
    # gradient w.r.t. masked inputs is exactly zero
    x.zero_grad()
    with Tape() as tape:
        tape.backward(tsum(mul(softmax_rows(x, mask), w)))
    assert (x.grad[~mask] == 0.0).all()


@settings(max_examples=30, deadline=None)
@given(
    st.lists(st.integers(1, 8), min_size=1, max_size=3),
    st.sampled_from(["gelu", "softmax", "layer_norm", "mul", "matmul"]),
    st.integers(0, 10**6),
)
def test_gradients_on_randomized_shapes(shape, op, seed):
    # engine invariant: central differences agree at rel err < 1e-4 on
    # randomized shapes up to 8x8x8 (float64 here, so much tighter)
    rng = _rng(seed)
    x = Tensor(rng.normal(size=shape), requires_grad=True, dtype=np.float64)
    w = Tensor(rng.normal(size=shape), dtype=np.float64)
    if op == "gelu":
        f = lambda t: tsum(gelu(t))
    elif op == "softmax":
        f = lambda t: tsum(mul(softmax_rows(t), w))
    elif op == "layer_norm":
        if shape[-1] < 2:
            return
        g = Tensor(rng.normal(size=shape[-1]), dtype=np.float64)
        b = Tensor(rng.normal(size=shape[-1]), dtype=np.float64)
        f = lambda t: tsum(mul(layer_norm(t, g, b), w))
    elif op == "mul":
        f = lambda t: tsum(mul(mul(t, w), t))
    else:
        m = Tensor(rng.normal(size=(shape[-1], 3)), dtype=np.float64)
        f = lambda t: tsum(matmul(t, m))
    err = grad_check(f, x, samples=8, h=1e-5, seed=seed)
    assert err < 1e-4
