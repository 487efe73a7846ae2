"""Hard-count evaluation: confusion tallies, precision / recall / IoU and the F-beta score."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(
            self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn
        )

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def _binary(mask, name: str) -> np.ndarray:
    arr = np.asarray(mask)
    if not np.isin(arr, (0, 1)).all():
        raise ValueError(f"{name} must contain only 0 and 1")
    return arr.astype(bool)


def confusion(pred_mask, gt_mask) -> ConfusionCounts:
    pred = _binary(pred_mask, "pred_mask")
    gt = _binary(gt_mask, "gt_mask")
    if pred.shape != gt.shape:
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    fp = int(np.count_nonzero(pred & ~gt))
    fn = int(np.count_nonzero(~pred & gt))
    return ConfusionCounts(tp, fp, fn, pred.size - tp - fp - fn)


@dataclass
class Scores:
    precision: float
    recall: float
    iou: float
    undefined: tuple[str, ...] = ()


def precision_recall_iou(c: ConfusionCounts) -> Scores:
    """Ratios in [0, 1]; an empty denominator yields NaN and is named in ``undefined``."""
    undefined = []

    def ratio(num, den, name):
        if den == 0:
            undefined.append(name)
            return math.nan
        return num / den

    p = ratio(c.tp, c.tp + c.fp, "precision")
    r = ratio(c.tp, c.tp + c.fn, "recall")
    iou = ratio(c.tp, c.tp + c.fp + c.fn, "iou")
    return Scores(p, r, iou, tuple(undefined))


def f_score(precision: float, recall: float, beta: float = 2.0) -> float:
    """``(1 + b^2) P R / (b^2 P + R)``; works in fractions or percent alike.

    A zero denominator returns 0.0; callers that care check
    ``precision == recall == 0`` themselves.
    """
    if beta <= 0:
        raise ValueError("beta must be positive")
    b2 = beta * beta
    den = b2 * precision + recall
    if den == 0:
        return 0.0
    return (1 + b2) * precision * recall / den


@dataclass
class EvalReport:
    counts: ConfusionCounts
    precision: float
    recall: float
    iou: float
    f_score: float
    beta: float = 2.0
    undefined: tuple[str, ...] = ()
    per_image_iou: list[tuple[str, float]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "iou": self.iou,
            "f_score": self.f_score,
            "beta": self.beta,
            "tp": self.counts.tp,
            "fp": self.counts.fp,
            "fn": self.counts.fn,
            "tn": self.counts.tn,
            "undefined": list(self.undefined),
        }

    def worst(self, k: int = 5) -> list[tuple[str, float]]:
        ranked = [x for x in self.per_image_iou if not math.isnan(x[1])]
        return sorted(ranked, key=lambda x: (x[1], x[0]))[:k]


def report_from_counts(c: ConfusionCounts, beta: float = 2.0) -> EvalReport:
    """Percent-valued report from one global (micro-averaged) tally."""
    s = precision_recall_iou(c)
    undefined = list(s.undefined)
    if "precision" in undefined or "recall" in undefined:
        f = math.nan
        undefined.append("f_score")
    else:
        if s.precision + s.recall == 0:
            undefined.append("f_score")
        f = 100.0 * f_score(s.precision, s.recall, beta)
    return EvalReport(
        counts=c,
        precision=100.0 * s.precision,
        recall=100.0 * s.recall,
        iou=100.0 * s.iou,
        f_score=f,
        beta=beta,
        undefined=tuple(undefined),
    )


def evaluate_masks(pairs: Iterable[tuple[str, np.ndarray, np.ndarray]], beta: float = 2.0) -> EvalReport:
    """Micro-averaged report over ``(id, pred_mask, gt_mask)`` triples."""
    total = ConfusionCounts()
    per_image = []
    seen = False
    for sample_id, pred, gt in pairs:
        seen = True
        c = confusion(pred, gt)
        total = total + c
        per_image.append((sample_id, precision_recall_iou(c).iou))
    if not seen:
        raise ValueError("cannot evaluate an empty dataset")
    report = report_from_counts(total, beta)
    report.per_image_iou = per_image
    return report


def evaluate_dataset(model, samples, beta: float = 2.0, batch_size: int = 4) -> EvalReport:
    """Run ``model`` over ``samples`` and tally argmax masks against ground truth.

    ``samples`` yields objects with ``id``, ``image`` (H, W, 3 uint8) and
    ``mask`` (H, W in {0, 1}); see :mod:`duformer.data`.
    """
    from .data import predict_masks

    samples = list(samples)
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    preds = predict_masks(model, [s.image for s in samples], batch_size=batch_size)
    return evaluate_masks(((s.id, p, s.mask) for s, p in zip(samples, preds)), beta)
