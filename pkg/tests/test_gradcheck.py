"""The finite-difference oracle itself, checked on closed forms."""

import numpy as np
import pytest

from rosfl.errors import ConfigurationError
from rosfl.nn import Conv3x3, Relu, finite_diff_grad, relative_error, stream
from conftest import kink_safe


def test_quadratic_derivative():
    theta = {"t": np.array([3.0])}
    grad = finite_diff_grad(lambda: float(theta["t"][0] ** 2), theta, eps=1e-5)
    assert abs(grad["t"][0] - 6.0) <= 1e-8


def test_constant_loss_gives_zeros():
    theta = {"t": np.ones((2, 3))}
    grad = finite_diff_grad(lambda: 42.0, theta)
    np.testing.assert_array_equal(grad["t"], np.zeros((2, 3)))


def test_eps_outside_range_rejected():
    with pytest.raises(ConfigurationError):
        finite_diff_grad(lambda: 0.0, {"t": np.ones(1)}, eps=1e-2)


def test_two_layer_net_analytic_vs_numeric():
    rng = stream(7, "two-layer")
    conv1, relu, conv2 = Conv3x3(1, 2, rng), Relu(), Conv3x3(2, 1, rng)
    x = kink_safe(rng.normal(size=(1, 1, 6, 6)))
    wgt = rng.normal(size=(1, 1, 6, 6))

    def forward():
        return conv2.forward(relu.forward(conv1.forward(x)))

    out = forward()
    g = conv1.backward(relu.backward(conv2.backward(wgt.copy())))
    analytic = {f"c1.{k}": v for k, v in conv1.grads.items()}
    analytic.update({f"c2.{k}": v for k, v in conv2.grads.items()})

    params = {f"c1.{k}": v for k, v in conv1.params.items()}
    params.update({f"c2.{k}": v for k, v in conv2.params.items()})
    numeric = finite_diff_grad(lambda: float(np.sum(wgt * forward())), params)
    for name in params:
        assert relative_error(analytic[name], numeric[name]) < 1e-6, name
