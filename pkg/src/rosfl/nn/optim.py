"""SGD and Adam with loss-coupled L2 weight decay.

Updates are applied in place on the arrays the model layers hold.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ConfigurationError, NumericError


def _check_match(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], kind: str) -> None:
    if set(params) != set(grads):
        raise ConfigurationError(f"{kind}: param/grad name mismatch")
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ConfigurationError(
                f"{kind}: grad shape {grads[name].shape} != param shape {p.shape} for {name}")


class Sgd:
    kind = "sgd"

    def __init__(self, lr: float, weight_decay: float = 0.0):
        self.lr = lr
        self.weight_decay = weight_decay

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        _check_match(params, grads, self.kind)
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            p -= self.lr * g
            if not np.all(np.isfinite(p)):
                raise NumericError(f"sgd: non-finite parameter {name}")
        return params


class Adam:
    kind = "adam"

    def __init__(self, lr: float, weight_decay: float = 0.0,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        _check_match(params, grads, self.kind)
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            if m.shape != p.shape:
                raise ConfigurationError(f"adam: stale state shape for {name}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if not np.all(np.isfinite(p)):
                raise NumericError(f"adam: non-finite parameter {name}")
        return params


def make_optimizer(kind: str, lr: float, weight_decay: float = 0.0):
    if kind == "sgd":
        return Sgd(lr, weight_decay)
    if kind == "adam":
        return Adam(lr, weight_decay)
    raise ConfigurationError(f"unknown optimizer kind: {kind!r}")
