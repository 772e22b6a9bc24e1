import numpy as np
import pytest

from rosfl.errors import ConfigurationError
from rosfl.nn import Adam, Sgd, make_optimizer


def test_sgd_direct_substitution():
    params = {"t": np.array([1.0])}
    Sgd(lr=0.1).step(params, {"t": np.array([2.0])})
    assert params["t"][0] == pytest.approx(0.8, abs=1e-15)


def test_sgd_weight_decay_coupled():
    params = {"t": np.array([2.0])}
    Sgd(lr=0.1, weight_decay=0.5).step(params, {"t": np.array([0.0])})
    # theta - lr*(g + wd*theta) = 2 - 0.1*1.0
    assert params["t"][0] == pytest.approx(1.9, abs=1e-15)


@pytest.mark.parametrize("kind", ["sgd", "adam"])
def test_zero_grad_zero_decay_is_identity(kind, rng):
    opt = make_optimizer(kind, lr=0.37)
    params = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=(5,))}
    before = {k: v.copy() for k, v in params.items()}
    for _ in range(3):
        opt.step(params, {k: np.zeros_like(v) for k, v in params.items()})
    for k in params:
        assert np.array_equal(params[k], before[k])


def test_adam_first_step_hand_evaluated():
    # m=0.1, v=0.001, bias-corrected mhat=1, vhat=1 -> theta ~ -lr/(1+eps)
    params = {"t": np.array([0.0])}
    Adam(lr=1e-4).step(params, {"t": np.array([1.0])})
    assert params["t"][0] == pytest.approx(-1e-4, rel=1e-6)


def test_adam_two_steps_match_recurrence():
    lr, b1, b2, eps = 1e-2, 0.9, 0.999, 1e-8
    params = {"t": np.array([0.5])}
    opt = Adam(lr=lr)
    grads = [0.3, -0.7]
    # independent scalar evaluation of the update recurrences
    t, m, v = 0.5, 0.0, 0.0
    for i, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        t -= lr * (m / (1 - b1 ** i)) / (np.sqrt(v / (1 - b2 ** i)) + eps)
        opt.step(params, {"t": np.array([g])})
    assert params["t"][0] == pytest.approx(t, abs=1e-15)
    assert opt.t == 2


def test_shape_mismatch_rejected():
    with pytest.raises(ConfigurationError):
        Sgd(0.1).step({"t": np.zeros(2)}, {"t": np.zeros(3)})
    with pytest.raises(ConfigurationError):
        Sgd(0.1).step({"t": np.zeros(2)}, {"u": np.zeros(2)})
