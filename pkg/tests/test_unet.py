"""Monolithic model construction: shapes, counts, determinism."""

import numpy as np
import pytest

from rosfl.errors import ConfigurationError
from rosfl.nn import stream
from rosfl.unet import UNetSpec, build_unet


def conv3x3_count(cin, cout):
    return cout * cin * 9 + cout


def test_parameter_count_closed_form():
    # L=2, base 4, in 1, out 1: enumerate the layer list by hand
    spec = UNetSpec(depth=2, base_channels=4, in_channels=1, out_channels=1,
                    height=16, width=16)
    expected = (
        conv3x3_count(1, 4) + conv3x3_count(4, 4)      # encoder level 1
        + conv3x3_count(4, 8) + conv3x3_count(8, 8)    # bottleneck
        + conv3x3_count(8, 4)                          # up-conv
        + conv3x3_count(8, 4) + conv3x3_count(4, 4)    # decoder level 1 after concat
        + (1 * 4 + 1)                                  # 1x1 task head
    )
    net = build_unet(spec, seed=0)
    assert net.param_count() == expected == 1805


def test_same_seed_bit_identical():
    spec = UNetSpec(depth=3, base_channels=4, in_channels=1, out_channels=1,
                    height=16, width=16)
    a = build_unet(spec, seed=123).params
    b = build_unet(spec, seed=123).params
    assert list(a) == list(b)
    for name in a:
        assert np.array_equal(a[name], b[name])
    c = build_unet(spec, seed=124).params
    assert any(not np.array_equal(a[name], c[name]) for name in a)


def test_divisibility_rule():
    ok = UNetSpec(depth=3, base_channels=2, in_channels=1, out_channels=1,
                  height=16, width=16)
    build_unet(ok, seed=0)
    bad = UNetSpec(depth=4, base_channels=2, in_channels=1, out_channels=1,
                   height=12, width=12)
    with pytest.raises(ConfigurationError):
        build_unet(bad, seed=0)
    with pytest.raises(ConfigurationError):
        build_unet(UNetSpec(depth=1, base_channels=2, in_channels=1, out_channels=1,
                            height=16, width=16), seed=0)


def test_forward_output_shapes():
    spec = UNetSpec(depth=2, base_channels=4, in_channels=2, out_channels=3,
                    height=8, width=8, task_head="segmentation-softmax")
    net = build_unet(spec, seed=5)
    x = stream(5, "x").normal(size=(2, 2, 8, 8))
    out = net.forward(x)
    assert out.shape == (2, 3, 8, 8)
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


def test_float32_option():
    spec = UNetSpec(depth=2, base_channels=2, in_channels=1, out_channels=1,
                    height=8, width=8, dtype="f32")
    net = build_unet(spec, seed=1)
    assert all(v.dtype == np.float32 for v in net.params.values())
    out = net.forward(stream(1, "x").normal(size=(1, 1, 8, 8)).astype(np.float32))
    assert out.dtype == np.float32
