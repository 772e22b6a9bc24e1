import numpy as np

from rosfl.nn import stream


def test_same_key_same_sequence():
    a = stream(42, "shuffle", 3, 7).normal(size=100)
    b = stream(42, "shuffle", 3, 7).normal(size=100)
    assert np.array_equal(a, b)


def test_distinct_keys_decorrelate():
    base = stream(42, "shuffle", 0, 0).normal(size=64)
    assert not np.array_equal(base, stream(42, "shuffle", 0, 1).normal(size=64))
    assert not np.array_equal(base, stream(42, "shuffle", 1, 0).normal(size=64))
    assert not np.array_equal(base, stream(42, "init", 0, 0).normal(size=64))
    assert not np.array_equal(base, stream(43, "shuffle", 0, 0).normal(size=64))


def test_negative_seed_allowed():
    a = stream(-5, "x").integers(0, 1 << 30, size=8)
    b = stream(-5, "x").integers(0, 1 << 30, size=8)
    assert np.array_equal(a, b)
