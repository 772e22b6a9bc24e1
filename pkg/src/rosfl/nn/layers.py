"""Per-layer forward/backward building blocks for NCHW activations.

Each layer owns its parameters plus the cache written by its latest
forward; backward consumes that cache exactly once. Everything is plain
numpy, float64 by default (float32 selectable for speed).
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ConfigurationError, NumericError, ProtocolMisuseError

DTYPES = {"f64": np.float64, "f32": np.float32}
DEFAULT_DTYPE = np.float64

LAYER_KINDS = (
    "conv3x3-same",
    "conv1x1",
    "relu",
    "maxpool2x2",
    "upsample-nearest2x",
    "concat-channels",
    "softmax-channels",
)


def ensure_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype=DEFAULT_DTYPE) -> np.ndarray:
    limit = math.sqrt(1.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype, copy=False)


def _check_nchw(x: np.ndarray, kind: str) -> None:
    if x.ndim != 4:
        raise ConfigurationError(f"{kind}: expected NCHW input, got shape {x.shape}")


class Layer:
    """Base layer: params in, grads out, single-slot forward cache."""

    kind = "?"

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, *inputs: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad_out: np.ndarray):
        raise NotImplementedError

    def _take_cache(self):
        if self._cache is None:
            raise ProtocolMisuseError(f"{self.kind}: backward called without a preceding forward")
        cache, self._cache = self._cache, None
        return cache


def _im2col3(x: np.ndarray) -> np.ndarray:
    # (B, C, H, W) -> (B, H*W, C*9) patches of the zero-padded input
    b, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b, h * w, c * 9)


def _col2im3(dcols: np.ndarray, shape) -> np.ndarray:
    # adjoint of _im2col3: scatter-add patches back onto the input grid
    b, c, h, w = shape
    d = dcols.reshape(b, h, w, c, 3, 3).transpose(0, 3, 1, 2, 4, 5)
    gxp = np.zeros((b, c, h + 2, w + 2), dtype=dcols.dtype)
    for ky in range(3):
        for kx in range(3):
            gxp[:, :, ky:ky + h, kx:kx + w] += d[:, :, :, :, ky, kx]
    return gxp[:, :, 1:h + 1, 1:w + 1]


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero-padded so H and W are preserved."""

    kind = "conv3x3-same"

    def __init__(self, in_channels: int, out_channels: int, rng=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        shape = (out_channels, in_channels, 3, 3)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = uniform_fan_in(rng, shape, fan_in=in_channels * 9, dtype=dtype)
        self.params = {"w": w, "b": np.zeros(out_channels, dtype=dtype)}

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_nchw(x, self.kind)
        b, c, h, w = x.shape
        if c != self.in_channels:
            raise ConfigurationError(
                f"{self.kind}: expected {self.in_channels} input channels, got {c}")
        cols = _im2col3(x)
        wmat = self.params["w"].reshape(self.out_channels, -1)
        out = cols @ wmat.T + self.params["b"]
        out = out.transpose(0, 2, 1).reshape(b, self.out_channels, h, w)
        self._cache = (cols, x.shape)
        return ensure_finite(out, self.kind)

    def backward(self, grad_out: np.ndarray):
        cols, xshape = self._take_cache()
        b, _, h, w = xshape
        g2 = grad_out.reshape(b, self.out_channels, h * w).transpose(0, 2, 1)
        wmat = self.params["w"].reshape(self.out_channels, -1)
        dw = np.tensordot(g2, cols, axes=([0, 1], [0, 1]))
        db = grad_out.sum(axis=(0, 2, 3))
        dcols = g2 @ wmat
        dx = _col2im3(dcols, xshape)
        self.grads = {"w": dw.reshape(self.params["w"].shape), "b": db}
        return dx


class Conv1x1(Layer):
    """1x1 convolution: a per-pixel linear map across channels."""

    kind = "conv1x1"

    def __init__(self, in_channels: int, out_channels: int, rng=None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        shape = (out_channels, in_channels)
        if rng is None:
            w = np.zeros(shape, dtype=dtype)
        else:
            w = uniform_fan_in(rng, shape, fan_in=in_channels, dtype=dtype)
        self.params = {"w": w, "b": np.zeros(out_channels, dtype=dtype)}

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_nchw(x, self.kind)
        if x.shape[1] != self.in_channels:
            raise ConfigurationError(
                f"{self.kind}: expected {self.in_channels} input channels, got {x.shape[1]}")
        out = np.einsum("oc,bchw->bohw", self.params["w"], x)
        out += self.params["b"][None, :, None, None]
        self._cache = x
        return ensure_finite(out, self.kind)

    def backward(self, grad_out: np.ndarray):
        x = self._take_cache()
        dw = np.einsum("bohw,bchw->oc", grad_out, x)
        db = grad_out.sum(axis=(0, 2, 3))
        dx = np.einsum("oc,bohw->bchw", self.params["w"], grad_out)
        self.grads = {"w": dw, "b": db}
        return dx


class Relu(Layer):
    kind = "relu"

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad_out: np.ndarray):
        mask = self._take_cache()
        return grad_out * mask


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2. Ties route the gradient to the first max."""

    kind = "maxpool2x2"

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_nchw(x, self.kind)
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ConfigurationError(f"{self.kind}: H and W must be even, got {h}x{w}")
        h2, w2 = h // 2, w // 2
        blocks = x.reshape(b, c, h2, 2, w2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h2, w2, 4)
        idx = blocks.argmax(axis=-1)
        out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
        self._cache = (idx, x.shape)
        return out

    def backward(self, grad_out: np.ndarray):
        idx, xshape = self._take_cache()
        b, c, h, w = xshape
        h2, w2 = h // 2, w // 2
        dblocks = np.zeros((b, c, h2, w2, 4), dtype=grad_out.dtype)
        np.put_along_axis(dblocks, idx[..., None], grad_out[..., None], axis=-1)
        return dblocks.reshape(b, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, h, w)


class UpsampleNearest2x(Layer):
    kind = "upsample-nearest2x"

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_nchw(x, self.kind)
        self._cache = x.shape
        return x.repeat(2, axis=2).repeat(2, axis=3)

    def backward(self, grad_out: np.ndarray):
        b, c, h, w = self._take_cache()
        return grad_out.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5))


class ConcatChannels(Layer):
    """Channel-axis concatenation of two NCHW tensors."""

    kind = "concat-channels"

    def forward(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        _check_nchw(a, self.kind)
        _check_nchw(b, self.kind)
        if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
            raise ConfigurationError(
                f"{self.kind}: incompatible shapes {a.shape} and {b.shape}")
        self._cache = a.shape[1]
        return np.concatenate([a, b], axis=1)

    def backward(self, grad_out: np.ndarray):
        ca = self._take_cache()
        return grad_out[:, :ca].copy(), grad_out[:, ca:].copy()


class SoftmaxChannels(Layer):
    """Per-pixel softmax over the channel axis (segmentation head)."""

    kind = "softmax-channels"

    def forward(self, x: np.ndarray) -> np.ndarray:
        _check_nchw(x, self.kind)
        z = x - x.max(axis=1, keepdims=True)
        e = np.exp(z)
        p = e / e.sum(axis=1, keepdims=True)
        self._cache = p
        return ensure_finite(p, self.kind)

    def backward(self, grad_out: np.ndarray):
        p = self._take_cache()
        dot = (grad_out * p).sum(axis=1, keepdims=True)
        return p * (grad_out - dot)
