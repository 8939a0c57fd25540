"""Dice loss, the combined objective, and the thresholded Dice metric."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass(frozen=True)
class LossConfig:
    lambda_balance: float = 0.01
    dice_smooth: float = 1e-6
    eval_threshold: float = 0.5

    def __post_init__(self):
        if self.lambda_balance < 0:
            raise ValueError("lambda_balance must be >= 0")
        if self.dice_smooth <= 0:
            raise ValueError("dice_smooth must be > 0")


def dice_loss(pred: Tensor, target, smooth: float = 1e-6) -> Tensor:
    """1 - (2 sum(p*y) + s) / (sum(p) + sum(y) + s), reduced over all axes."""
    y = target.data if isinstance(target, Tensor) else np.asarray(target)
    if pred.shape != y.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {y.shape}")
    y = Tensor(y.astype(pred.dtype))
    inter = T.tsum(pred * y)
    denom = T.tsum(pred) + T.tsum(y) + smooth
    return 1.0 - (2.0 * inter + smooth) / denom


def batch_dice_loss(probs: Tensor, target: np.ndarray, smooth: float = 1e-6) -> Tensor:
    """Per-image Dice loss over [B, H, W], averaged over the batch."""
    b = probs.shape[0]
    p = probs.reshape(b, -1)
    y = Tensor(target.reshape(b, -1).astype(probs.dtype))
    inter = T.tsum(p * y, axis=1)
    denom = T.tsum(p, axis=1) + T.tsum(y, axis=1) + smooth
    return T.mean(1.0 - (2.0 * inter + smooth) / denom)


def total_loss(seg: Tensor, balance: Tensor, cfg: LossConfig = LossConfig()) -> Tensor:
    if not (np.isfinite(seg.data).all() and np.isfinite(balance.data).all()):
        raise FloatingPointError(f"non-finite loss component: seg={seg.data}, balance={balance.data}")
    return seg + balance * cfg.lambda_balance


def dice_metric(pred_logits, target, threshold: float = 0.5) -> float:
    """Hard Dice of sigmoid(logits) > threshold; two empty masks score 1."""
    z = pred_logits.data if isinstance(pred_logits, Tensor) else np.asarray(pred_logits)
    # sigmoid(z) > t  <=>  z > logit(t)
    cut = np.log(threshold / (1.0 - threshold))
    p = z > cut
    t = np.asarray(target) > 0
    denom = p.sum() + t.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(p, t).sum() / denom)


def soft_dice_coefficient(pred: np.ndarray, target: np.ndarray, smooth: float = 1e-6) -> float:
    pred, target = np.asarray(pred, float), np.asarray(target, float)
    return float((2 * (pred * target).sum() + smooth) / (pred.sum() + target.sum() + smooth))
