"""Segmentation objective: soft Dice plus weighted binary cross-entropy on logits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import ops
from .ops import ShapeError
from .tensor import Tensor, make_result


@dataclass
class LossConfig:
    alpha: float = 1.0
    dice_epsilon: float = 1e-5
    logits_input: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.dice_epsilon <= 0:
            raise ValueError(f"dice_epsilon must be > 0, got {self.dice_epsilon}")


def _target_array(logits: Tensor, target) -> np.ndarray:
    g = target.data if isinstance(target, Tensor) else np.asarray(target)
    if g.shape != logits.shape:
        raise ShapeError(f"target shape {g.shape} does not match logits shape {logits.shape}")
    return g.astype(logits.dtype, copy=False)


def dice_loss(logits: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    """Batch mean of ``1 - (2 sum(p g) + eps) / (sum(p) + sum(g) + eps)``.

    ``p`` is ``sigmoid(logits)`` unless ``cfg.logits_input`` is false, in which
    case ``logits`` already holds probabilities.
    """
    cfg = cfg or LossConfig()
    g = _target_array(logits, target)
    eps = cfg.dice_epsilon
    z = logits.data
    p = expit(z) if cfg.logits_input else z
    b = z.shape[0]
    axes = tuple(range(1, z.ndim))
    inter = (p * g).sum(axis=axes, keepdims=True)
    denom = p.sum(axis=axes, keepdims=True) + g.sum(axis=axes, keepdims=True) + eps
    ratio = (2 * inter + eps) / denom
    value = np.asarray((1 - ratio).mean(), dtype=z.dtype)

    def backward(grad):
        dp = -(2 * g * denom - (2 * inter + eps)) / denom**2 / b
        if cfg.logits_input:
            dp = dp * p * (1 - p)
        return (grad * dp,)

    return make_result(value, (logits,), backward, "dice_loss")


def bce_loss(logits: Tensor, target) -> Tensor:
    """Mean binary cross-entropy on logits, in the overflow-free form."""
    g = _target_array(logits, target)
    z = logits.data
    per_pixel = np.maximum(z, 0) - z * g + np.log1p(np.exp(-np.abs(z)))
    n = z.size
    value = np.asarray(per_pixel.mean(), dtype=z.dtype)
    return make_result(value, (logits,), lambda grad: (grad * (expit(z) - g) / n,), "bce_loss")


def seg_loss(logits: Tensor, target, cfg: LossConfig | None = None) -> Tensor:
    """``dice_loss + alpha * bce_loss``."""
    cfg = cfg or LossConfig()
    dice = dice_loss(logits, target, cfg)
    if cfg.alpha == 0:
        return dice
    return ops.add(dice, ops.mul(bce_loss(logits, target), cfg.alpha))
