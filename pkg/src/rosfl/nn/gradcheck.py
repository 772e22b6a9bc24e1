"""Central finite-difference gradient oracle.

Independent of the analytic backward paths it is used to check: it only
re-evaluates a scalar loss under elementwise parameter perturbations.
The loss callable must be deterministic (two evaluations at the same
parameters return the same value); that is the caller's responsibility.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ConfigurationError


def finite_diff_grad(loss_fn: Callable[[], float],
                     params: dict[str, np.ndarray],
                     eps: float = 1e-5) -> dict[str, np.ndarray]:
    """d loss / d theta for every scalar in params, by central differences.

    The arrays in `params` are perturbed in place between loss
    evaluations and restored afterwards.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigurationError(f"eps {eps} outside [1e-7, 1e-3]")
    out = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        pf = p.reshape(-1)
        gf = g.reshape(-1)
        for i in range(pf.size):
            orig = pf[i]
            pf[i] = orig + eps
            lp = loss_fn()
            pf[i] = orig - eps
            lm = loss_fn()
            pf[i] = orig
            gf[i] = (lp - lm) / (2.0 * eps)
        out[name] = g
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max elementwise |a - n| / (max(|a|, |n|) + 1e-10)."""
    denom = np.maximum(np.abs(analytic), np.abs(numeric)) + 1e-10
    return float(np.max(np.abs(analytic - numeric) / denom))
