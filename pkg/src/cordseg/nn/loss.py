"""Soft Dice loss with the squared-denominator formulation."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


def dice_loss(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0):
    """Soft Dice loss over the whole tensor, plus its gradient w.r.t. pred.

    loss = 1 - (2*sum(p*t) + smooth) / (sum(p^2) + sum(t^2) + smooth)

    Insensitive to class imbalance; the smoothing constant keeps the loss
    defined for empty targets.
    """
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    if smooth <= 0:
        raise ConfigError(f"smoothing constant must be positive, got {smooth}")
    inter = float(np.sum(pred * target, dtype=np.float64))
    den = float(np.sum(pred * pred, dtype=np.float64)
                + np.sum(target * target, dtype=np.float64) + smooth)
    num = 2.0 * inter + smooth
    loss = 1.0 - num / den
    grad = ((2.0 / den**2) * (num * pred - den * target)).astype(pred.dtype)
    return loss, grad


def dice_loss_batch(pred: np.ndarray, target: np.ndarray, smooth: float = 1.0):
    """Mean of per-sample soft Dice losses over the batch axis.

    Matches the per-volume formulation used for training; returns
    (mean loss, gradient w.r.t. pred).
    """
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: pred {pred.shape} vs target {target.shape}")
    losses = []
    grad = np.empty_like(pred)
    for i in range(pred.shape[0]):
        loss_i, grad[i] = dice_loss(pred[i], target[i], smooth)
        losses.append(loss_i)
    return float(np.mean(losses)), grad / pred.shape[0]
