"""Training objective: mean binary cross-entropy plus smoothed soft Dice."""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

CLAMP_EPS = 1e-7
DICE_SMOOTH = 1.0


@dataclass
class LossTerms:
    bce: Tensor
    dice: Tensor
    total: Tensor


def _check_pair(pred: Tensor, label: Tensor):
    if pred.shape != label.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs label {label.shape}")
    lab = label.data
    if not np.all((lab == 0) | (lab == 1)):
        raise ValueError("label must be binary")


def bce_loss(pred: Tensor, label: Tensor) -> Tensor:
    """Mean of -[y*log(p) + (1-y)*log(1-p)] with p clamped away from {0, 1}."""
    _check_pair(pred, label)
    p = T.clip(pred, CLAMP_EPS, 1.0 - CLAMP_EPS)
    ll = label * T.log(p) + (1.0 - label) * T.log(1.0 - p)
    return -T.tmean(ll)


def dice_loss(pred: Tensor, label: Tensor) -> Tensor:
    """Soft Dice loss 1 - (2*overlap + s) / (sum_p + sum_y + s), s = 1."""
    if pred.shape != label.shape:
        raise T.ShapeError(f"prediction {pred.shape} vs label {label.shape}")
    overlap = T.tsum(pred * label)
    denom = T.tsum(pred) + T.tsum(label) + DICE_SMOOTH
    return 1.0 - (2.0 * overlap + DICE_SMOOTH) / denom


def total_loss(pred: Tensor, label: Tensor) -> LossTerms:
    """Sum of the two terms; gradients add term-wise."""
    bce = bce_loss(pred, label)
    dice = dice_loss(pred, label)
    return LossTerms(bce=bce, dice=dice, total=bce + dice)
