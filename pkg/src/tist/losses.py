"""Training objectives.

All losses consume per-pixel class probabilities (softmax outputs) and,
when asked, return the analytic gradient with respect to the pre-softmax
logits, so the network backward pass can start straight from them.
Ignore-index pixels contribute to neither value nor gradient. Loss math
runs in float64 regardless of the model dtype.
"""

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidConfigError, InvalidInputError
from .pseudolabel import IGNORE_INDEX


@dataclass(frozen=True)
class LossWeights:
    ce_weight: float = 1.0
    log_dice_weight: float = 1.0
    dice_smooth: float = 1e-6

    def __post_init__(self):
        if self.ce_weight < 0 or self.log_dice_weight < 0:
            raise InvalidConfigError("loss weights must be >= 0")
        if self.ce_weight + self.log_dice_weight <= 0:
            raise InvalidConfigError("at least one loss weight must be positive")
        if self.dice_smooth <= 0:
            raise InvalidConfigError("dice_smooth must be > 0")


@dataclass(frozen=True)
class RampSchedule:
    """Pseudo-loss weight ramp: exp[-5 (1 - epoch/total)], reaching 1 at
    the final epoch. `squared` switches to the exp[-5 (1 - e/E)^2] variant
    common elsewhere; the linear exponent is the default."""

    total_epochs: int
    squared: bool = False

    def __post_init__(self):
        if self.total_epochs < 1:
            raise InvalidConfigError("total_epochs must be >= 1")


def lambda_at(schedule, epoch):
    """Ramp weight at an epoch in [0, total_epochs]."""
    if not 0 <= epoch <= schedule.total_epochs:
        raise InvalidInputError(
            f"epoch {epoch} outside [0, {schedule.total_epochs}]")
    x = 1.0 - epoch / schedule.total_epochs
    if schedule.squared:
        x = x * x
    return float(np.exp(-5.0 * x))


@dataclass
class LossResult:
    value: float
    grad: np.ndarray | None
    n_valid: int

    @property
    def empty(self):
        return self.n_valid == 0


def _valid_mask(labels, num_classes, ignore_index):
    labels = np.asarray(labels)
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= num_classes))
    if np.any(bad):
        raise InvalidInputError("label values outside class range")
    return valid


def _masked_cross_entropy(probs, labels, valid, with_grad):
    """Mean CE over valid pixels; gradient w.r.t. logits is (p - y)/n."""
    n_valid = int(valid.sum())
    if n_valid == 0:
        return 0.0, (np.zeros_like(probs) if with_grad else None), 0
    safe_labels = np.where(valid, labels, 0)
    p_true = np.take_along_axis(probs, safe_labels[..., None], axis=-1)[..., 0]
    logp = np.log(np.maximum(p_true, 1e-300))
    value = -float(logp[valid].sum() / n_valid)
    grad = None
    if with_grad:
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, safe_labels[..., None], 1.0, axis=-1)
        grad = (probs - onehot) * (valid[..., None] / n_valid)
    return value, grad, n_valid


def _log_soft_dice(probs, labels, valid, smooth, with_grad):
    """-log of the class-averaged soft Dice over valid pixels.

    Gradient is returned w.r.t. logits (softmax already folded in).
    """
    C = probs.shape[-1]
    safe_labels = np.where(valid, labels, 0)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, safe_labels[..., None], 1.0, axis=-1)
    onehot *= valid[..., None]
    pv = probs * valid[..., None]
    num = 2.0 * (pv * onehot).sum(axis=tuple(range(probs.ndim - 1))) + smooth
    den = pv.sum(axis=tuple(range(probs.ndim - 1))) \
        + onehot.sum(axis=tuple(range(probs.ndim - 1))) + smooth
    dice_per_class = num / den
    dice = float(dice_per_class.mean())
    value = -float(np.log(dice))
    if not with_grad:
        return value, None
    # d(-log D)/dp_c[i] for valid i, then chain through softmax
    dl_dp = -(2.0 * onehot * den - num) / (den * den) / (C * dice)
    dl_dp *= valid[..., None]
    inner = (probs * dl_dp).sum(axis=-1, keepdims=True)
    grad = probs * (dl_dp - inner)
    return value, grad


def soft_dice(probs, labels, ignore_index=IGNORE_INDEX, smooth=1e-6):
    """Per-class soft Dice coefficients over non-ignored pixels."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    valid = _valid_mask(labels, probs.shape[-1], ignore_index)
    safe_labels = np.where(valid, labels, 0)
    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, safe_labels[..., None], 1.0, axis=-1)
    onehot *= valid[..., None]
    pv = probs * valid[..., None]
    axes = tuple(range(probs.ndim - 1))
    num = 2.0 * (pv * onehot).sum(axis=axes) + smooth
    den = pv.sum(axis=axes) + onehot.sum(axis=axes) + smooth
    return num / den


def supervised_loss(probs, labels, weights=LossWeights(),
                    ignore_index=IGNORE_INDEX, with_grad=False):
    """Weighted cross-entropy plus -log(soft Dice) on labeled pixels.

    Returns a LossResult; an all-ignored batch yields value 0 with a
    warning. `result.grad` is d(loss)/d(logits).
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.shape[:-1] != labels.shape:
        raise InvalidInputError(
            f"probs {probs.shape} do not match labels {labels.shape}")
    valid = _valid_mask(labels, probs.shape[-1], ignore_index)
    ce, ce_grad, n_valid = _masked_cross_entropy(probs, labels, valid, with_grad)
    if n_valid == 0:
        warnings.warn("supervised_loss: batch has no labeled pixels",
                      RuntimeWarning, stacklevel=2)
        return LossResult(0.0, ce_grad, 0)
    dice, dice_grad = _log_soft_dice(probs, labels, valid,
                                     weights.dice_smooth, with_grad)
    value = weights.ce_weight * ce + weights.log_dice_weight * dice
    grad = None
    if with_grad:
        grad = weights.ce_weight * ce_grad + weights.log_dice_weight * dice_grad
    return LossResult(float(value), grad, n_valid)


def pseudo_supervised_loss(probs_transformed, pseudo_labels,
                           ignore_index=IGNORE_INDEX, with_grad=False):
    """Mean cross-entropy over retained (non-ignored) pseudo-labeled pixels.

    Pseudo labels are integer constants: no gradient flows into their
    construction. Returns 0 when every pixel is ignored.
    """
    probs = np.asarray(probs_transformed, dtype=np.float64)
    labels = np.asarray(pseudo_labels)
    if probs.shape[:-1] != labels.shape:
        raise InvalidInputError(
            f"probs {probs.shape} do not match pseudo labels {labels.shape}")
    valid = _valid_mask(labels, probs.shape[-1], ignore_index)
    ce, grad, n_valid = _masked_cross_entropy(probs, labels, valid, with_grad)
    return LossResult(float(ce), grad, n_valid)


def overall_loss(sup, ps, lam):
    """Total objective: supervised + lam * pseudo-supervised."""
    if lam < 0:
        raise InvalidInputError(f"lambda must be >= 0, got {lam}")
    return float(sup) + float(lam) * float(ps)
