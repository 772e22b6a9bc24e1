"""Task metrics and training losses shared by every runner.

Restoration reports PSNR against the clean target; segmentation reports
per-class Dice/Jaccard with macro averaging over foreground classes.
Losses return (value, grad wrt the model output) so the runners can feed
the gradient straight into the backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

PSNR_CAP_DB = 99.0  # written to CSV in place of the +inf sentinel

_LOG_EPS = 1e-12
_DICE_EPS = 1e-7


@dataclass(frozen=True)
class MetricRecord:
    round_index: int
    client: str  # client index as a string, or "global"
    name: str
    value: float


def cap_for_csv(value: float) -> float:
    if math.isinf(value):
        return PSNR_CAP_DB
    return min(value, PSNR_CAP_DB)


def mse(pred: np.ndarray, target: np.ndarray) -> float:
    if pred.shape != target.shape:
        raise ConfigurationError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))


def psnr(pred: np.ndarray, target: np.ndarray, data_range: float = 1.0) -> float:
    if data_range <= 0:
        raise ConfigurationError(f"data_range must be > 0, got {data_range}")
    err = mse(pred, target)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / err)


def _class_sets(pred_mask: np.ndarray, true_mask: np.ndarray, cls: int):
    if pred_mask.shape != true_mask.shape:
        raise ConfigurationError("mask shapes differ")
    if not np.issubdtype(pred_mask.dtype, np.integer) or not np.issubdtype(true_mask.dtype, np.integer):
        raise ConfigurationError("masks must be integer-valued")
    if not isinstance(cls, (int, np.integer)) or cls < 0:
        raise ConfigurationError(f"invalid class label {cls!r}")
    return pred_mask == cls, true_mask == cls


def dice(pred_mask: np.ndarray, true_mask: np.ndarray, cls: int) -> float:
    a, b = _class_sets(pred_mask, true_mask, cls)
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / denom


def jaccard(pred_mask: np.ndarray, true_mask: np.ndarray, cls: int) -> float:
    a, b = _class_sets(pred_mask, true_mask, cls)
    union = int((a | b).sum())
    if union == 0:
        return 1.0
    return int((a & b).sum()) / union


def macro_dice(pred_mask: np.ndarray, true_mask: np.ndarray, n_classes: int) -> float:
    """Mean Dice over foreground classes 1..n_classes-1."""
    if n_classes < 2:
        raise ConfigurationError("need at least one foreground class")
    return float(np.mean([dice(pred_mask, true_mask, c) for c in range(1, n_classes)]))


def _check_probs(probs: np.ndarray, mask: np.ndarray) -> None:
    if probs.ndim != 4:
        raise ConfigurationError("probabilities must be NCHW")
    if mask.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ConfigurationError(f"mask shape {mask.shape} does not match probs {probs.shape}")
    if not np.issubdtype(mask.dtype, np.integer):
        raise ConfigurationError("masks must be integer-valued")
    if mask.min() < 0 or mask.max() >= probs.shape[1]:
        raise ConfigurationError(
            f"mask labels outside [0, {probs.shape[1] - 1}]")


def _one_hot(mask: np.ndarray, n_classes: int) -> np.ndarray:
    b, h, w = mask.shape
    oh = np.zeros((b, n_classes, h, w))
    np.put_along_axis(oh, mask[:, None], 1.0, axis=1)
    return oh


def cross_entropy(probs: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean -log p(true class) per pixel; grad is wrt the probabilities."""
    _check_probs(probs, mask)
    oh = _one_hot(mask, probs.shape[1])
    n_pix = mask.size
    value = float(-np.sum(oh * np.log(probs + _LOG_EPS)) / n_pix)
    grad = -oh / ((probs + _LOG_EPS) * n_pix)
    return value, grad


def soft_dice_loss(probs: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
    """1 - mean soft Dice over all classes, differentiable in the probs."""
    _check_probs(probs, mask)
    n_classes = probs.shape[1]
    oh = _one_hot(mask, n_classes)
    p_sum = probs.sum(axis=(0, 2, 3))
    t_sum = oh.sum(axis=(0, 2, 3))
    inter = (probs * oh).sum(axis=(0, 2, 3))
    num = 2.0 * inter + _DICE_EPS
    den = p_sum + t_sum + _DICE_EPS
    value = float(1.0 - np.mean(num / den))
    # d/dp[c,pix] of num_c/den_c = (2*t - num_c/den_c) / den_c ; mean over classes
    coeff_t = (2.0 / den)[None, :, None, None]
    coeff_p = (num / (den * den))[None, :, None, None]
    grad = -(coeff_t * oh - coeff_p) / n_classes
    return value, grad


class MseLoss:
    """Mean squared error over all elements."""

    name = "mse"

    def value_and_grad(self, pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
        if pred.shape != target.shape:
            raise ConfigurationError(f"shape mismatch {pred.shape} vs {target.shape}")
        diff = pred - target
        value = float(np.mean(diff * diff))
        return value, (2.0 / diff.size) * diff


class SegmentationLoss:
    """Cross-entropy plus soft Dice, equally weighted, on probabilities."""

    name = "ce+dice"

    def value_and_grad(self, probs: np.ndarray, mask: np.ndarray) -> tuple[float, np.ndarray]:
        ce, g_ce = cross_entropy(probs, mask)
        sd, g_sd = soft_dice_loss(probs, mask)
        return ce + sd, g_ce + g_sd


def make_loss(task: str):
    if task == "restoration":
        return MseLoss()
    if task == "segmentation":
        return SegmentationLoss()
    raise ConfigurationError(f"unknown task {task!r}")
