"""Binary cross-entropy, soft Dice, their weighted sum, and the hard DSC metric."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import DiffTensor

GRANULARITIES = ("per_image", "batch")


@dataclass(frozen=True)
class LossConfig:
    """Numerical knobs for the losses.

    ``clamp_eps`` keeps BCE away from log(0).  ``dice_smooth`` is added to the
    numerator and denominator of the Dice ratio; 0 gives the unsmoothed loss.
    ``dice_granularity`` selects a Dice ratio per image (then averaged) or one
    ratio over the whole batch.
    """

    clamp_eps: float = 1e-7
    dice_smooth: float = 0.0
    dice_granularity: str = "per_image"

    def __post_init__(self):
        if not 0.0 < self.clamp_eps <= 1e-3:
            raise ValueError(f"clamp_eps must lie in (0, 1e-3], got {self.clamp_eps}")
        if self.dice_smooth < 0.0:
            raise ValueError(f"dice_smooth must be nonnegative, got {self.dice_smooth}")
        if self.dice_granularity not in GRANULARITIES:
            raise ValueError(f"dice_granularity must be one of {GRANULARITIES}, got {self.dice_granularity!r}")


def _target_tensor(pred: DiffTensor, target) -> DiffTensor:
    y = target.data if isinstance(target, DiffTensor) else np.asarray(target, dtype=np.float64)
    if y.shape != pred.shape:
        raise DimensionError(f"prediction shape {pred.shape} != target shape {y.shape}")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ContractError("target mask must be binary (values in {0, 1})")
    return DiffTensor(y)


def bce_loss(pred: DiffTensor, target, cfg: LossConfig = LossConfig()) -> DiffTensor:
    """Mean binary cross-entropy over every pixel of the batch."""
    y = _target_tensor(pred, target)
    p = T.clamp(pred, cfg.clamp_eps, 1.0 - cfg.clamp_eps)
    pos = T.mul(y, T.log(p))
    neg = T.mul(T.affine(y, -1.0, 1.0), T.log(T.affine(p, -1.0, 1.0)))
    return T.affine(T.mean(T.add(pos, neg)), -1.0, 0.0)


def soft_dice_loss(pred: DiffTensor, target, cfg: LossConfig = LossConfig()) -> DiffTensor:
    """``1 - (2<y, p> + s) / (<y, y> + <p, p> + s)``.

    An exactly-zero ratio 0/0 (empty target, all-zero prediction, no
    smoothing) counts as a perfect match: loss 0 and no gradient.  With an
    empty target and any nonzero prediction the loss is 1 and the gradient
    vanishes identically.
    """
    y = _target_tensor(pred, target)
    per_image = cfg.dice_granularity == "per_image"
    inter = T.sum(T.mul(y, pred), per_image=per_image)
    y_sq = T.sum(T.mul(y, y), per_image=per_image)
    p_sq = T.sum(T.mul(pred, pred), per_image=per_image)
    num = T.affine(inter, 2.0, cfg.dice_smooth)
    den = T.affine(T.add(y_sq, p_sq), 1.0, cfg.dice_smooth)
    ratio = T.div(num, den, zero_by_zero=1.0)
    return T.affine(T.mean(ratio), -1.0, 1.0)


def combined_loss(
    pred: DiffTensor,
    target,
    weights: tuple[float, float],
    cfg: LossConfig = LossConfig(),
) -> DiffTensor:
    """``w_bce * BCE + w_dice * Dice``; a term with weight exactly 0 is never built."""
    w_bce, w_dice = (float(w) for w in weights)
    if w_bce < 0.0 or w_dice < 0.0:
        raise ContractError(f"loss weights must be nonnegative, got {weights}")
    terms = []
    if w_bce != 0.0:
        loss = bce_loss(pred, target, cfg)
        terms.append(loss if w_bce == 1.0 else T.affine(loss, w_bce, 0.0))
    if w_dice != 0.0:
        loss = soft_dice_loss(pred, target, cfg)
        terms.append(loss if w_dice == 1.0 else T.affine(loss, w_dice, 0.0))
    if not terms:
        return DiffTensor.scalar(0.0)
    return terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])


class Overlap(NamedTuple):
    dsc: float
    tp: int
    fp: int
    fn: int


def overlap_counts(pred_mask, gt_mask) -> tuple[int, int, int]:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise DimensionError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    for name, m in (("prediction", pred), ("ground truth", gt)):
        if m.dtype != bool and not np.all((m == 0) | (m == 1)):
            raise ContractError(f"{name} mask must be binary")
    pred = pred.astype(bool)
    gt = gt.astype(bool)
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return tp, fp, fn


def dsc_metric(pred_mask, gt_mask) -> Overlap:
    """Dice similarity 2TP / (2TP + FP + FN) of two binary masks."""
    tp, fp, fn = overlap_counts(pred_mask, gt_mask)
    denom = 2 * tp + fp + fn
    if denom == 0:
        raise ContractError("DSC is undefined when both masks are empty; apply the empty-mask scoring rules")
    return Overlap(2 * tp / denom, tp, fp, fn)
