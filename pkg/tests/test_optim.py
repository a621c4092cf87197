import numpy as np
import pytest

import selfguide.autodiff as ad
from selfguide.optim import AdamState, OptimError, adam_step, init_adam
from selfguide.rng import SeededRng


def test_first_step_matches_hand_evaluation():
    # t=0->1, g=1, m=v=0: delta = -lr * 1 / (1 + eps) = -9.9999999e-4
    params = {"w": np.array([0.0])}
    state = init_adam(params, lr=1e-3)
    adam_step(params, {"w": np.array([1.0])}, state)
    expected = -1e-3 / (1.0 + 1e-8)
    assert params["w"][0] == pytest.approx(expected, abs=1e-12)
    assert state.t == 1


def test_zero_gradient_leaves_parameters_unchanged():
    params = {"w": np.array([1.5, -2.0])}
    before = params["w"].copy()
    state = init_adam(params, lr=1e-2)
    adam_step(params, {"w": np.zeros(2)}, state)
    np.testing.assert_array_equal(params["w"], before)


def test_lr_zero_is_identity():
    rng = SeededRng(4)
    params = {"w": rng.gaussian((8,)), "b": rng.gaussian((3,))}
    before = {k: v.copy() for k, v in params.items()}
    state = init_adam(params, lr=0.0)
    for _ in range(5):
        adam_step(params, {k: rng.gaussian(v.shape) for k, v in params.items()}, state)
    for k in params:
        np.testing.assert_array_equal(params[k], before[k])


def test_nonfinite_gradient_names_parameter():
    params = {"layer.weight": np.zeros(2)}
    state = init_adam(params)
    with pytest.raises(OptimError, match="layer.weight"):
        adam_step(params, {"layer.weight": np.array([1.0, np.nan])}, state)


def _run_tiny_fit(seed):
    """Fit w to minimize (w - 3)^2 for a few steps; returns final params."""
    rng = SeededRng(seed)
    params = {"w": rng.gaussian((4,))}
    state = init_adam(params, lr=0.05)
    for _ in range(50):
        v = ad.leaf(params["w"], name="w")
        resid = ad.sub(v, 3.0)
        loss = ad.reduce_sum(ad.mul(resid, resid))
        grads = ad.vjp(loss)
        adam_step(params, {"w": grads[v]}, state)
    return params["w"]


def test_same_seed_bit_identical_runs():
    a = _run_tiny_fit(17)
    b = _run_tiny_fit(17)
    np.testing.assert_array_equal(a, b)


def test_step_counter_increments_by_one():
    params = {"w": np.zeros(1)}
    state = init_adam(params)
    for expected in (1, 2, 3):
        adam_step(params, {"w": np.ones(1)}, state)
        assert state.t == expected
