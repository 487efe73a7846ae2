"""Joint multi-weight segmentation loss: weighted focal + phi (MCC) + weighted dice.

All functions take softmaxed probabilities ``prob`` of shape [N, 2, H, W]
(channel 1 is the power-line class) and an integer/binary ``target`` of
shape [N, H, W].
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-7
MCC_FLOOR = 1e-7
DICE_SMOOTH = 1e-7


@dataclass(frozen=True)
class LossWeights:
    rho: float = 3.0
    tau: float = 1.5
    phi: float = 3.0
    alpha: float = 0.25
    gamma: float = 2.0
    theta: float = 1.0
    class_weights: tuple[float, float] = (1.0, 5.0)
    stage_weights: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    # "multi" (focal + phi + dice) or "ce" (weighted cross-entropy baseline)
    kind: str = "multi"

    def __post_init__(self):
        object.__setattr__(self, "class_weights", tuple(float(v) for v in self.class_weights))
        object.__setattr__(self, "stage_weights", tuple(float(v) for v in self.stage_weights))
        if min(self.rho, self.tau, self.phi) < 0:
            raise ValueError("rho, tau, phi must be non-negative")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        if self.gamma < 0 or self.theta <= 0:
            raise ValueError("gamma must be >= 0 and theta > 0")
        if len(self.class_weights) != 2 or min(self.class_weights) <= 0:
            raise ValueError("class_weights needs two positive entries")
        if self.kind not in ("multi", "ce"):
            raise ValueError(f"unknown loss kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {
            "rho": self.rho, "tau": self.tau, "phi": self.phi,
            "alpha": self.alpha, "gamma": self.gamma, "theta": self.theta,
            "class_weights": list(self.class_weights),
            "stage_weights": list(self.stage_weights),
            "kind": self.kind,
        }


def _check_target(target: np.ndarray, prob: Tensor) -> np.ndarray:
    target = np.asarray(target)
    if prob.ndim != 4 or prob.shape[1] != 2:
        raise ValueError(f"expected [N, 2, H, W] probabilities, got {prob.shape}")
    if target.shape != (prob.shape[0],) + prob.shape[2:]:
        raise ValueError(f"target shape {target.shape} does not match probabilities {prob.shape}")
    if target.size == 0:
        raise ValueError("empty image")
    if not np.isin(target, (0, 1)).all():
        raise ValueError("target must be binary")
    return target.astype(prob.dtype)


def _pixel_weights(target: np.ndarray, class_weights) -> np.ndarray:
    w0, w1 = class_weights
    return np.where(target > 0.5, w1, w0).astype(target.dtype)


def focal_loss(prob: Tensor, target, w: LossWeights = LossWeights()) -> Tensor:
    p = _check_target(target, prob)
    fg = prob[:, 1]
    bg = 1.0 - fg
    log_fg = T.log(T.clip(fg, LOG_FLOOR, None))
    log_bg = T.log(T.clip(bg, LOG_FLOOR, None))
    pos = T.scale(T.power(bg, w.gamma) * log_fg * p, w.alpha)
    negs = T.scale(T.power(fg, w.gamma) * log_bg * (1.0 - p), 1.0 - w.alpha)
    per_pixel = -(pos + negs) * _pixel_weights(p, w.class_weights)
    return per_pixel.mean()


def cross_entropy_loss(prob: Tensor, target, class_weights=(1.0, 5.0)) -> Tensor:
    p = _check_target(target, prob)
    log_fg = T.log(T.clip(prob[:, 1], LOG_FLOOR, None))
    log_bg = T.log(T.clip(prob[:, 0], LOG_FLOOR, None))
    nll = -(log_fg * p + log_bg * (1.0 - p))
    return (nll * _pixel_weights(p, class_weights)).mean()


@dataclass
class SoftCounts:
    tp: Tensor
    fp: Tensor
    fn: Tensor
    tn: Tensor


def soft_confusion(prob: Tensor, target) -> SoftCounts:
    """Differentiable TP/FP/FN/TN summed over every pixel of the batch."""
    p = _check_target(target, prob)
    fg = prob[:, 1]
    bg = 1.0 - fg
    return SoftCounts(
        tp=(fg * p).sum(),
        fp=(fg * (1.0 - p)).sum(),
        fn=(bg * p).sum(),
        tn=(bg * (1.0 - p)).sum(),
    )


def mcc(c: SoftCounts) -> Tensor:
    num = c.tp * c.tn - c.fp * c.fn
    prod = (c.tp + c.fp) * (c.tp + c.fn) * (c.tn + c.fp) * (c.tn + c.fn)
    if prod.item() < MCC_FLOOR**2:
        logger.warning("degenerate MCC denominator (single-class target or prediction)")
    den = T.sqrt(T.clip(prod, MCC_FLOOR**2, None))
    return num / den


def phi_loss(prob: Tensor, target, theta: float = 1.0) -> Tensor:
    return T.power(1.0 - mcc(soft_confusion(prob, target)), theta)


def dice_from_counts(tp, fp, fn):
    """``1 - 2tp / (2tp + fp + fn)`` with a tiny smoothing term on both sides."""
    return 1.0 - (2.0 * tp + DICE_SMOOTH) / (2.0 * tp + fp + fn + DICE_SMOOTH)


def dice_loss(prob: Tensor, target, class_weights=(1.0, 5.0)) -> Tensor:
    c = soft_confusion(prob, target)
    fg = dice_from_counts(c.tp, c.fp, c.fn)
    bg = dice_from_counts(c.tn, c.fn, c.fp)
    w0, w1 = class_weights
    return (bg * w0 + fg * w1) / (w0 + w1)


def map_loss(logits: Tensor, target, w: LossWeights) -> dict:
    """Loss terms for one logit map; ``total`` is the weighted combination."""
    prob = T.softmax(logits, axis=1)
    if w.kind == "ce":
        ce = cross_entropy_loss(prob, target, w.class_weights)
        return {"total": ce, "ce": ce}
    f = focal_loss(prob, target, w)
    ph = phi_loss(prob, target, w.theta)
    d = dice_loss(prob, target, w.class_weights)
    return {"total": combine(f, ph, d, w), "focal": f, "phi": ph, "dice": d}


def combine(focal, phi, dice, w: LossWeights = LossWeights()):
    return focal * w.rho + phi * w.tau + dice * w.phi


@dataclass
class JointLoss:
    total: Tensor
    per_map: list[dict] = field(default_factory=list)

    def breakdown(self) -> dict:
        """Plain-float summary: total, per-term sums and per-map totals."""
        out = {"total": self.total.item(), "maps": [m["total"].item() for m in self.per_map]}
        for key in self.per_map[0]:
            if key != "total":
                out[key] = float(sum(m[key].item() for m in self.per_map))
        return out


def joint_loss(logit_maps: Sequence[Tensor], target, w: LossWeights = LossWeights()) -> JointLoss:
    """Deep-supervised loss: weighted sum over the five stage maps and the fused map."""
    maps = list(logit_maps)
    if len(maps) != len(w.stage_weights):
        raise ValueError(f"{len(maps)} logit maps but {len(w.stage_weights)} stage weights")
    per_map = [map_loss(m, target, w) for m in maps]
    total = per_map[0]["total"] * w.stage_weights[0]
    for sw, m in zip(w.stage_weights[1:], per_map[1:]):
        total = total + m["total"] * sw
    return JointLoss(total, per_map)
