"""Adam optimizer contracts."""

import numpy as np
import pytest

import toporl.numcore as nc
from toporl.errors import ContractError


def _params(vals):
    return {"w": nc.parameter(np.array(vals))}


def test_zero_grad_leaves_params_unchanged():
    params = _params([1.0, -2.0])
    state = nc.init_adam(params)
    before = params["w"].data.copy()
    nc.adam_step(params, state, lr=0.1)
    np.testing.assert_array_equal(params["w"].data, before)


def test_first_step_moves_by_lr_times_sign():
    params = _params([1.0, -2.0, 0.5])
    state = nc.init_adam(params)
    g = np.array([0.3, -4.0, 1e-3])
    params["w"].grad[...] = g
    before = params["w"].data.copy()
    nc.adam_step(params, state, lr=0.01)
    delta = params["w"].data - before
    # step 1 with bias correction: delta = -lr * g / (|g| + eps') ~= -lr * sign(g)
    np.testing.assert_allclose(delta, -0.01 * np.sign(g), rtol=1e-4)


def test_zero_lr_leaves_params_unchanged():
    params = _params([1.0, -2.0])
    state = nc.init_adam(params)
    params["w"].grad[...] = [5.0, -3.0]
    before = params["w"].data.copy()
    nc.adam_step(params, state, lr=0.0)
    np.testing.assert_array_equal(params["w"].data, before)


def test_grads_zeroed_after_step():
    params = _params([1.0])
    state = nc.init_adam(params)
    params["w"].grad[...] = 2.0
    nc.adam_step(params, state, lr=0.01)
    np.testing.assert_array_equal(params["w"].grad, [0.0])


def test_state_shape_mismatch_rejected():
    params = _params([1.0, 2.0])
    state = nc.init_adam(params)
    state.m["w"] = np.zeros(3)
    with pytest.raises(ContractError):
        nc.adam_step(params, state, lr=0.01)


def test_frozen_params_skipped():
    params = {"w": nc.parameter(np.array([1.0])), "f": nc.parameter(np.array([5.0]))}
    state = nc.init_adam(params)
    params["f"].requires_grad = False
    params["w"].grad[...] = 1.0
    nc.adam_step(params, state, lr=0.1)
    assert params["f"].data[0] == 5.0
    assert params["w"].data[0] != 1.0


def test_adam_matches_reference_formula():
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=7)
    params = {"w": nc.parameter(w0.copy())}
    state = nc.init_adam(params)
    lr, b1, b2, eps = 0.02, 0.9, 0.999, 1e-8
    m = np.zeros(7)
    v = np.zeros(7)
    ref = w0.copy()
    for t in range(1, 6):
        g = rng.normal(size=7)
        params["w"].grad[...] = g
        nc.adam_step(params, state, lr=lr, b1=b1, b2=b2, eps=eps)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        ref -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
    np.testing.assert_allclose(params["w"].data, ref, rtol=1e-12)
