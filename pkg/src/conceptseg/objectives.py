"""Composite segmentation loss (soft Dice + BCE) and the full training
objective: current-task segmentation plus the unfrozen estimators'
reconstruction terms.

Per-class probabilities are independent sigmoids rather than a joint
softmax, so frozen class rows of earlier tasks receive exactly zero
gradient from a later task's loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import EvaluationError, ShapeError

DICE_EPS = 1e-5
BCE_CLAMP = 1e-7
DICE_WEIGHT = 0.8
BCE_WEIGHT = 0.2


def dice_loss(probs: nm.Tensor, target: np.ndarray,
              eps: float = DICE_EPS) -> nm.Tensor:
    """Soft Dice: 1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps).

    The smoothing term makes the empty-target/zero-prediction case a
    clean zero loss.
    """
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ShapeError(f"probs {probs.shape} vs target {target.shape}")
    t = nm.Tensor(target)
    inter = nm.tsum(nm.mul(probs, t))
    denom = nm.tsum(probs) + float(target.sum())
    return 1.0 - (inter * 2.0 + eps) / (denom + eps)


def bce_loss(probs: nm.Tensor, target: np.ndarray,
             clamp: float = BCE_CLAMP) -> nm.Tensor:
    """Mean binary cross-entropy with probability clamping."""
    target = np.asarray(target, dtype=np.float64)
    if probs.shape != target.shape:
        raise ShapeError(f"probs {probs.shape} vs target {target.shape}")
    p = nm.clip(probs, clamp, 1.0 - clamp)
    t = nm.Tensor(target)
    ll = nm.add(nm.mul(t, nm.log(p)), nm.mul(1.0 - t, nm.log(1.0 - p)))
    return -nm.tmean(ll)


def seg_loss(probs: nm.Tensor, target: np.ndarray) -> tuple[nm.Tensor, nm.Tensor, nm.Tensor]:
    """(dice, bce, 0.8*dice + 0.2*bce) for one class map."""
    d = dice_loss(probs, target)
    b = bce_loss(probs, target)
    return d, b, d * DICE_WEIGHT + b * BCE_WEIGHT


@dataclass
class LossReport:
    """Scalar components of one optimization step."""

    dice: float
    bce: float
    seg: float
    est: dict[str, float] = field(default_factory=dict)
    cal: float = 0.0
    ctx: float = 0.0
    total: float = 0.0

    def to_record(self) -> dict:
        return {"dice": self.dice, "bce": self.bce, "seg": self.seg,
                "est": dict(self.est), "cal": self.cal, "ctx": self.ctx,
                "total": self.total}


def total_objective(class_logit_maps: dict[int, nm.Tensor],
                    class_targets: dict[int, np.ndarray],
                    estimator_terms: dict[str, nm.Tensor],
                    calibration_terms: dict[str, nm.Tensor] | None = None,
                    context_terms: dict[str, nm.Tensor] | None = None,
                    ) -> tuple[nm.Tensor, LossReport]:
    """Summed per-class seg losses plus the unfrozen estimator penalties,
    the newborn router-column calibration and the wrong-context class
    suppression (both present only while a site's newborn trains).

    `class_logit_maps` holds the covered classes only (current task plus
    background); estimator terms are keyed by site label for the report.
    Returns the scalar to differentiate and the detached report.
    """
    if set(class_logit_maps) != set(class_targets):
        raise ShapeError("logit maps and targets cover different classes")
    dice_total: nm.Tensor | None = None
    bce_total: nm.Tensor | None = None
    for ci in sorted(class_logit_maps):
        probs = nm.sigmoid(class_logit_maps[ci])
        d = dice_loss(probs, class_targets[ci])
        b = bce_loss(probs, class_targets[ci])
        dice_total = d if dice_total is None else dice_total + d
        bce_total = b if bce_total is None else bce_total + b
    seg = dice_total * DICE_WEIGHT + bce_total * BCE_WEIGHT
    total = seg
    est_report = {}
    for label in sorted(estimator_terms):
        term = estimator_terms[label]
        total = total + term
        est_report[label] = float(term)
    cal_value = 0.0
    for label in sorted(calibration_terms or {}):
        term = calibration_terms[label]
        total = total + term
        cal_value += float(term)
    ctx_value = 0.0
    for label in sorted(context_terms or {}):
        term = context_terms[label]
        total = total + term
        ctx_value += float(term)
    report = LossReport(dice=float(dice_total), bce=float(bce_total),
                        seg=float(seg), est=est_report, cal=cal_value,
                        ctx=ctx_value, total=float(total))
    for value in (report.dice, report.bce, report.seg, report.total):
        if not math.isfinite(value):
            raise EvaluationError(f"non-finite loss component in {report}")
    return total, report
