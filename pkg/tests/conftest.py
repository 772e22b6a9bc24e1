import numpy as np
import pytest

from rosfl.nn import (
    ConcatChannels,
    Conv1x1,
    Conv3x3,
    MaxPool2x2,
    Relu,
    SoftmaxChannels,
    UpsampleNearest2x,
    stream,
)


def kink_safe(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Push values away from zero so finite differences never cross the
    ReLU kink."""
    return np.where(np.abs(x) < margin, np.sign(x) * margin + x, x)


def tie_safe_blocks(x: np.ndarray, margin: float = 1e-3) -> np.ndarray:
    """Break near-ties inside 2x2 pooling blocks with a deterministic
    per-position offset so FD never flips an argmax."""
    b, c, h, w = x.shape
    offsets = np.arange(4).reshape(2, 2) * (3 * margin)
    tiled = np.tile(offsets, (h // 2, w // 2))
    return x + tiled[None, None]


def random_layer_case(kind: str, rng: np.random.Generator):
    """(layer, inputs) with shapes drawn small enough for FD sweeps."""
    b = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    h = 2 * int(rng.integers(1, 4))
    w = 2 * int(rng.integers(1, 4))
    x = rng.normal(size=(b, c, h, w))
    if kind == "conv3x3-same":
        out_c = int(rng.integers(1, 4))
        return Conv3x3(c, out_c, rng), (x,)
    if kind == "conv1x1":
        out_c = int(rng.integers(1, 4))
        return Conv1x1(c, out_c, rng), (x,)
    if kind == "relu":
        return Relu(), (kink_safe(x),)
    if kind == "maxpool2x2":
        return MaxPool2x2(), (tie_safe_blocks(x),)
    if kind == "upsample-nearest2x":
        return UpsampleNearest2x(), (x,)
    if kind == "concat-channels":
        c2 = int(rng.integers(1, 4))
        return ConcatChannels(), (x, rng.normal(size=(b, c2, h, w)))
    if kind == "softmax-channels":
        return SoftmaxChannels(), (x,)
    raise AssertionError(kind)


@pytest.fixture
def rng():
    return stream(20240817, "tests")
