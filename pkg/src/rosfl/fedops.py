"""Weighted parameter aggregation and the dynamic weight-correction step.

Both are pure functions over ParamSets; the servers call them once per
communication round (head/tail on the aggregation server, body on the
computation server).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .nn.params import ParamSet

DIRECTIONS = ("extrapolate", "stabilize")


@dataclass(frozen=True)
class DwcsConfig:
    """Correction-step settings.

    mu scales the drift gradient, eta is the correction step size, beta
    caps the blending factor. direction picks the sign of the step:
    "extrapolate" pushes along the round-to-round drift, "stabilize"
    steps against it (plain descent on the drift loss).
    """

    mu: float = 1e-4
    eta: float = 1e-4
    beta: float = 0.99
    direction: str = "extrapolate"

    def validate(self) -> None:
        if self.mu < 0:
            raise ConfigurationError(f"dwcs.mu must be >= 0, got {self.mu}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigurationError(f"dwcs.beta must be in [0, 1), got {self.beta}")
        if self.eta <= 0:
            raise ConfigurationError(f"dwcs.eta must be > 0, got {self.eta}")
        if self.direction not in DIRECTIONS:
            raise ConfigurationError(f"dwcs.direction must be one of {DIRECTIONS}")


def normalized_weights(sizes) -> list[float]:
    """Per-client weights proportional to local dataset sizes."""
    total = float(sum(sizes))
    if total <= 0:
        raise ConfigurationError("dataset sizes must sum to a positive value")
    return [float(s) / total for s in sizes]


def aggregate(param_sets: list[ParamSet], weights: list[float],
              round_index: int | None = None) -> ParamSet:
    """Elementwise weighted average, summed in ascending client order."""
    if not param_sets:
        raise ConfigurationError("aggregate needs at least one ParamSet")
    if len(weights) != len(param_sets):
        raise ConfigurationError(
            f"{len(weights)} weights for {len(param_sets)} param sets")
    if any(w < 0 for w in weights):
        raise ConfigurationError("aggregation weights must be >= 0")
    if abs(sum(weights) - 1.0) > 1e-12:
        raise ConfigurationError(f"aggregation weights sum to {sum(weights)!r}, not 1")
    first = param_sets[0]
    for ps in param_sets[1:]:
        if ps.part != first.part or not ps.same_structure(first):
            raise ConfigurationError("param sets disagree in part, names, or shapes")

    tensors: dict[str, np.ndarray] = {}
    for name in first.tensors:
        acc = weights[0] * param_sets[0].tensors[name]
        for ps, w in zip(param_sets[1:], weights[1:]):
            acc = acc + w * ps.tensors[name]
        tensors[name] = acc
    tag = first.round_index if round_index is None else round_index
    return ParamSet(first.part, tensors, tag)


def alpha(k: int, beta: float) -> float:
    """Blending factor min(1 - 1/(k+1), beta) for round k >= 1."""
    if k < 1:
        raise ConfigurationError(f"round index must be >= 1, got {k}")
    return min(1.0 - 1.0 / (k + 1), beta)


def correct(theta_k: ParamSet, theta_prev: ParamSet, cfg: DwcsConfig, k: int) -> ParamSet:
    """Blend the aggregated model with a correction step along the drift.

    The correction model steps eta*mu along (theta_k - theta_prev), with
    the sign chosen by cfg.direction; the result is the alpha-weighted
    blend of aggregated and correction models and becomes the next
    round's anchor.
    """
    cfg.validate()
    if theta_k.part != theta_prev.part or not theta_k.same_structure(theta_prev):
        raise ConfigurationError("aggregated and anchor param sets do not match")
    a = alpha(k, cfg.beta)
    sign = 1.0 if cfg.direction == "extrapolate" else -1.0
    scale = a * sign * cfg.eta * cfg.mu
    tensors = {}
    for name, cur in theta_k.tensors.items():
        drift = cur - theta_prev.tensors[name]
        # (1-a)*cur + a*(cur + sign*eta*mu*drift) == cur + a*sign*eta*mu*drift
        tensors[name] = cur + scale * drift
    return ParamSet(theta_k.part, tensors, k)


class AnchorStore:
    """Previous round's post-correction model per part; one update per round."""

    def __init__(self):
        self._anchors: dict[str, ParamSet] = {}

    def get(self, part: str) -> ParamSet | None:
        return self._anchors.get(part)

    def put(self, part: str, params: ParamSet) -> None:
        old = self._anchors.get(part)
        if old is not None and params.round_index <= old.round_index:
            raise ConfigurationError(
                f"anchor for {part} must advance: {old.round_index} -> {params.round_index}")
        self._anchors[part] = params.copy()
