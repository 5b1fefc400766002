"""Autodiff core: op semantics, backward contracts, gradient checks.

The gradient oracle is central finite differences; every differentiable op
is checked against it at random points with eps=1e-5 and max relative error
below 1e-4 (normalized by the largest gradient magnitude).
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import toporl.numcore as nc
from toporl.errors import (
    ConfigError,
    ContractError,
    DegenerateDistributionError,
    NumericalError,
    ShapeError,
)

EPS = 1e-5
TOL = 1e-4


def max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.max(np.abs(a), initial=0.0), np.max(np.abs(b), initial=0.0), 1e-8)
    return float(np.max(np.abs(a - b)) / scale)


def check_grads(build_loss, params: dict):
    """Compare backward() grads against finite differences for each param."""
    with nc.Tape():
        loss = build_loss()
        nc.backward(loss)
    for name, p in params.items():
        fd = nc.finite_difference_gradient(lambda _: build_loss(), p, eps=EPS)
        err = max_rel_err(p.grad, fd)
        assert err < TOL, f"{name}: max rel err {err:.3e}"
        p.zero_grad()


# ---------------------------------------------------------------------------
# forward semantics
# ---------------------------------------------------------------------------


def test_matmul_identity():
    eye = nc.Tensor(np.eye(2))
    out = nc.matmul(eye, eye)
    np.testing.assert_array_equal(out.data, np.eye(2))


def test_matmul_hand_case():
    a = nc.Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = nc.Tensor([[0.0], [1.0]])
    out = nc.matmul(a, b)
    np.testing.assert_array_equal(out.data, [[2.0], [4.0]])


def test_matmul_shape_mismatch():
    a = nc.Tensor(np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        nc.matmul(a, nc.Tensor(np.zeros((2, 3))))


def test_softmax_uniform():
    out = nc.softmax(nc.Tensor([0.0, 0.0, 0.0]))
    np.testing.assert_allclose(out.data, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_softmax_overflow_stability():
    out = nc.softmax(nc.Tensor([1000.0, 1000.0]))
    np.testing.assert_allclose(out.data, [0.5, 0.5], rtol=0, atol=1e-15)


def test_softmax_single_survivor():
    out = nc.softmax(nc.Tensor([1.0, 2.0]), mask=np.array([False, True]))
    np.testing.assert_array_equal(out.data, [0.0, 1.0])


def test_softmax_fully_masked():
    with pytest.raises(DegenerateDistributionError):
        nc.softmax(nc.Tensor([1.0, 2.0]), mask=np.array([False, False]))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=2, max_size=8))
def test_softmax_rows_sum_to_one(vals):
    out = nc.softmax(nc.Tensor(np.array([vals])))
    assert abs(out.data.sum() - 1.0) <= 1e-12


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=6), st.floats(-30, 30))
def test_softmax_shift_invariance(vals, c):
    base = nc.softmax(nc.Tensor(np.array(vals))).data
    shifted = nc.softmax(nc.Tensor(np.array(vals) + c)).data
    np.testing.assert_allclose(base, shifted, atol=1e-12)


def test_layer_norm_constant_row_is_bias():
    x = nc.Tensor(np.full((2, 4), 3.7))
    gain = nc.Tensor(np.full(4, 2.0))
    bias = nc.Tensor(np.arange(4.0))
    out = nc.layer_norm(x, gain, bias)
    np.testing.assert_allclose(out.data, np.tile(np.arange(4.0), (2, 1)), atol=1e-12)


def test_cross_entropy_uniform_logits():
    out = nc.cross_entropy(nc.Tensor([0.0, 0.0]), 0)
    assert abs(out.item() - np.log(2.0)) < 1e-12


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        nc.cross_entropy(nc.Tensor([0.0, 0.0]), 2)


def test_cross_entropy_masked_target_rejected():
    with pytest.raises(ContractError):
        nc.cross_entropy(nc.Tensor([0.0, 1.0]), 0, mask=np.array([False, True]))


def test_dropout_zero_rate_identity():
    x = nc.Tensor([1.0, 2.0])
    out = nc.dropout(x, 0.0, np.random.default_rng(0), enabled=True)
    assert out is x


def test_dropout_rate_range():
    with pytest.raises(ConfigError):
        nc.dropout(nc.Tensor([1.0]), 1.0, np.random.default_rng(0))


def test_dropout_seed_replay_bit_identical():
    x = nc.Tensor(np.linspace(-1, 1, 64).reshape(8, 8))
    a = nc.dropout(x, 0.4, np.random.default_rng(99)).data
    b = nc.dropout(x, 0.4, np.random.default_rng(99)).data
    np.testing.assert_array_equal(a, b)


def test_dropout_scales_survivors():
    x = nc.Tensor(np.ones((40, 40)))
    out = nc.dropout(x, 0.25, np.random.default_rng(3)).data
    survivors = out[out != 0.0]
    np.testing.assert_allclose(survivors, 1.0 / 0.75)


def test_embedding_lookup_index_error():
    table = nc.Tensor(np.zeros((4, 2)))
    with pytest.raises(IndexError):
        nc.embedding_lookup(table, [0, 4])


def test_nonfinite_rejected():
    with pytest.raises(NumericalError):
        nc.Tensor([np.nan, 1.0])
    with pytest.raises(NumericalError):
        nc.exp(nc.Tensor([1000.0]))


# ---------------------------------------------------------------------------
# backward contracts
# ---------------------------------------------------------------------------


def test_backward_sum_gives_ones():
    w = nc.parameter(np.array([1.0, 5.0, -2.0]))
    with nc.Tape():
        nc.backward(nc.sum_all(w * 1.0))
    np.testing.assert_array_equal(w.grad, [1.0, 1.0, 1.0])


def test_backward_quadratic():
    w = nc.parameter(np.array([1.0, 2.0]))
    with nc.Tape():
        nc.backward(nc.sum_all(nc.mul(w, w)))
    np.testing.assert_allclose(w.grad, [2.0, 4.0])


def test_backward_accumulates_across_calls():
    w = nc.parameter(np.array([1.0, 2.0]))
    with nc.Tape():
        loss = nc.sum_all(nc.mul(w, w))
        nc.backward(loss)
        once = w.grad.copy()
        nc.backward(loss)
    np.testing.assert_allclose(w.grad, 2 * once)


def test_backward_nonscalar_rejected():
    w = nc.parameter(np.array([1.0, 2.0]))
    with nc.Tape():
        with pytest.raises(ContractError):
            nc.backward(nc.mul(w, w))


def test_backward_requires_tape_product():
    w = nc.parameter(np.array([1.0]))
    with nc.Tape():
        with pytest.raises(ContractError):
            nc.backward(w)


def test_backward_linearity():
    rng = np.random.default_rng(7)
    w = nc.parameter(rng.normal(size=(3, 3)))

    def f():
        return nc.sum_all(nc.mul(w, w))

    def g():
        return nc.sum_all(nc.gelu(w))

    a, b = 0.7, -1.3
    with nc.Tape():
        nc.backward(f())
    gf = w.grad.copy()
    w.zero_grad()
    with nc.Tape():
        nc.backward(g())
    gg = w.grad.copy()
    w.zero_grad()
    with nc.Tape():
        nc.backward(nc.add(nc.scale(f(), a), nc.scale(g(), b)))
    np.testing.assert_allclose(w.grad, a * gf + b * gg, atol=1e-12)


def test_tape_clear_frees_intermediates_keeps_params():
    w = nc.parameter(np.array([2.0]))
    with nc.Tape() as tape:
        out = nc.mul(w, w)
        nc.backward(nc.sum_all(out))
        assert out.grad is not None
    assert len(tape) == 0
    assert out.grad is None
    assert w.grad is not None


def test_no_grad_blocks_recording():
    w = nc.parameter(np.array([2.0]))
    with nc.Tape() as tape:
        with nc.no_grad():
            out = nc.mul(w, w)
        assert not out.requires_grad
        assert len(tape) == 0


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def test_fd_of_sum_is_ones():
    x = nc.Tensor(np.array([3.0, -1.0, 0.5]))
    fd = nc.finite_difference_gradient(lambda t: float(t.data.sum()), x)
    np.testing.assert_allclose(fd, np.ones(3), atol=1e-9)


def test_fd_of_square_at_three():
    x = nc.Tensor(np.array(3.0))
    fd = nc.finite_difference_gradient(lambda t: float(t.data) ** 2, x, eps=1e-5)
    assert abs(float(fd) - 6.0) < 1e-6


def test_fd_agrees_with_backward_on_two_layer_net():
    rng = np.random.default_rng(0)
    x = nc.parameter(rng.normal(size=(4, 3)))
    w1 = nc.parameter(rng.normal(size=(3, 8)) * 0.5)
    b1 = nc.parameter(np.zeros(8))
    w2 = nc.parameter(rng.normal(size=(8, 2)) * 0.5)
    params = {"x": x, "w1": w1, "b1": b1, "w2": w2}

    def loss():
        h = nc.gelu(nc.add(nc.matmul(x, w1), b1))
        logits = nc.matmul(h, w2)
        row = nc.reshape(nc.take_rows(logits, [0]), (2,))
        return nc.cross_entropy(row, 1)

    check_grads(loss, params)


# ---------------------------------------------------------------------------
# per-op gradient checks
# ---------------------------------------------------------------------------


def test_grad_matmul_add_mul():
    rng = np.random.default_rng(1)
    a = nc.parameter(rng.normal(size=(3, 4)))
    b = nc.parameter(rng.normal(size=(4, 2)))
    c = nc.parameter(rng.normal(size=(2,)))

    def loss():
        return nc.sum_all(nc.mul(nc.add(nc.matmul(a, b), c), nc.add(nc.matmul(a, b), c)))

    check_grads(loss, {"a": a, "b": b, "c": c})


def test_grad_softmax_masked():
    rng = np.random.default_rng(2)
    x = nc.parameter(rng.normal(size=(2, 5)))
    mask = np.array([[True, True, False, True, True]] * 2)
    w = nc.Tensor(rng.normal(size=(2, 5)))

    def loss():
        return nc.sum_all(nc.mul(nc.softmax(x, mask=mask), w))

    check_grads(loss, {"x": x})


def test_grad_layer_norm():
    rng = np.random.default_rng(3)
    x = nc.parameter(rng.normal(size=(3, 6)))
    gain = nc.parameter(rng.normal(size=6) + 1.0)
    bias = nc.parameter(rng.normal(size=6))
    w = nc.Tensor(rng.normal(size=(3, 6)))

    def loss():
        return nc.sum_all(nc.mul(nc.layer_norm(x, gain, bias), w))

    check_grads(loss, {"x": x, "gain": gain, "bias": bias})


def test_grad_gelu_exp_minimum_clip():
    rng = np.random.default_rng(4)
    x = nc.parameter(rng.normal(size=(2, 4)))
    y = nc.parameter(rng.normal(size=(2, 4)))

    def loss():
        t = nc.minimum(nc.gelu(x), nc.exp(nc.scale(y, 0.3)))
        return nc.sum_all(nc.clip_const(t, -0.8, 0.8))

    check_grads(loss, {"x": x, "y": y})


def test_grad_embedding_and_structure_ops():
    rng = np.random.default_rng(5)
    table = nc.parameter(rng.normal(size=(6, 4)))
    w = nc.Tensor(rng.normal(size=(3, 8)))

    def loss():
        e = nc.embedding_lookup(table, [1, 4, 1])
        cat = nc.concat_cols(e, nc.transpose(nc.transpose(e)))
        return nc.sum_all(nc.mul(cat, w))

    check_grads(loss, {"table": table})


def test_grad_mean_rows_stack_slice():
    rng = np.random.default_rng(6)
    x = nc.parameter(rng.normal(size=(4, 6)))

    def loss():
        m = nc.mean_rows(x)
        s = nc.stack_rows([m, m])
        return nc.sum_all(nc.mul(nc.slice_cols(s, 1, 5), nc.slice_cols(s, 0, 4)))

    check_grads(loss, {"x": x})


def test_grad_cross_entropy_masked():
    rng = np.random.default_rng(8)
    x = nc.parameter(rng.normal(size=(5,)))
    mask = np.array([True, False, True, True, True])

    def loss():
        return nc.cross_entropy(x, 3, mask=mask)

    check_grads(loss, {"x": x})
    with nc.Tape():
        nc.backward(nc.cross_entropy(x, 3, mask=mask))
    assert x.grad[1] == 0.0


def test_grad_dropout_fixed_mask():
    rng = np.random.default_rng(9)
    x = nc.parameter(rng.normal(size=(3, 5)))

    def loss():
        return nc.sum_all(nc.dropout(x, 0.4, np.random.default_rng(42), enabled=True))

    check_grads(loss, {"x": x})
