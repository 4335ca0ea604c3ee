"""Dice, BCE and L-infinity losses plus the weighted deep-supervision
composite objective.

All losses accept an autodiff Tensor prediction and a plain array target
and return a scalar Tensor, so the composite objective is differentiable
end to end. Single samples are (H, W); batches are (N, 1, H, W), in
which case each loss is the mean of the per-sample values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import InvalidLevelCount, LengthMismatch, ShapeMismatch

DICE_EPS = 1e-6
BCE_CLAMP = 1e-7


def _prep(pred, target, name):
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if pred.data.shape != target.shape:
        raise ShapeMismatch(
            f"{name}: prediction shape {pred.data.shape} != target shape {target.shape}"
        )
    if pred.data.ndim == 2:
        axes = None  # single sample; reductions collapse everything
    elif pred.data.ndim == 4:
        axes = (1, 2, 3)
    else:
        raise ShapeMismatch(f"{name}: expected (H, W) or (N, 1, H, W) operands")
    return pred, target, axes


def _collapse(per_sample: Tensor, axes) -> Tensor:
    return per_sample if axes is None else ad.mean(per_sample)


def dice_loss(pred, target, eps: float = DICE_EPS) -> Tensor:
    """1 - (2 sum(p t) + eps) / (sum(p) + sum(t) + eps)."""
    pred, target, axes = _prep(pred, target, "dice_loss")
    inter = ad.sum_(ad.mul(pred, Tensor(target)), axes=axes)
    tsum = target.sum() if axes is None else target.sum(axis=axes)
    denom = ad.sum_(pred, axes=axes) + Tensor(tsum)
    score = (2.0 * inter + eps) / (denom + eps)
    return _collapse(1.0 - score, axes)


def bce_loss(pred, target, clamp: float = BCE_CLAMP) -> Tensor:
    """Pixel-mean binary cross-entropy; predictions clamped away from {0, 1}."""
    pred, target, _ = _prep(pred, target, "bce_loss")
    p = ad.clamp(pred, clamp, 1.0 - clamp)
    t = Tensor(target)
    ll = ad.mul(t, ad.log(p)) + ad.mul(Tensor(1.0 - target), ad.log(1.0 - p))
    return -ad.mean(ll)


def linf_loss(pred, target) -> Tensor:
    """Max absolute deviation; subgradient goes to the first maximizer in
    row-major order."""
    pred, target, axes = _prep(pred, target, "linf_loss")
    return _collapse(ad.max_reduce(ad.abs_(pred - Tensor(target)), axes=axes), axes)


def supervision_weights(num_levels: int) -> np.ndarray:
    """Per-level loss weights 2^-n normalized to sum to one (index 0 is
    the final output)."""
    if num_levels < 1:
        raise InvalidLevelCount(f"need at least one level, got {num_levels}")
    raw = 0.5 ** np.arange(num_levels, dtype=np.float64)
    return raw / raw.sum()


@dataclass
class LossBreakdown:
    """Scalar values of each term of the composite objective."""

    total: float
    dice_term: float
    bce_term: float
    linf_terms: list[float] = field(default_factory=list)


def composite_loss(outputs, strong_label, pyramid, weights):
    """Weighted objective: w0 (Dice + BCE)(x0, S) + sum_n wn Linf(xn, Pn).

    outputs[0] is compared against the strong label; outputs[n] (n >= 1)
    against pyramid[n-1]. Returns (scalar Tensor, LossBreakdown).
    """
    outputs = list(outputs)
    pyramid = list(pyramid)
    weights = np.asarray(weights, dtype=np.float64)
    if len(outputs) != len(weights):
        raise LengthMismatch(
            f"{len(outputs)} outputs vs {len(weights)} weights"
        )
    if len(outputs) != len(pyramid) + 1:
        raise LengthMismatch(
            f"{len(outputs)} outputs require {len(outputs) - 1} pyramid levels, "
            f"got {len(pyramid)}"
        )
    dice = dice_loss(outputs[0], strong_label)
    bce = bce_loss(outputs[0], strong_label)
    total = float(weights[0]) * (dice + bce)
    linf_vals = []
    for n in range(1, len(outputs)):
        term = linf_loss(outputs[n], pyramid[n - 1])
        linf_vals.append(term.item())
        total = total + float(weights[n]) * term
    breakdown = LossBreakdown(
        total=total.item(),
        dice_term=dice.item(),
        bce_term=bce.item(),
        linf_terms=linf_vals,
    )
    return total, breakdown
