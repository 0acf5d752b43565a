"""Multi-label confusion counts and macro/micro precision, recall and F1."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence

import numpy as np

from .errors import DimensionError, ParameterError


def binarize(p, threshold: float = 0.5) -> np.ndarray:
    """``1`` where ``p >= threshold`` (the boundary counts as positive)."""
    return (np.asarray(p, dtype=np.float64) >= threshold).astype(np.int64)


def _as_binary(a, name: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be [N, K], got shape {arr.shape}")
    if not np.isin(arr, (0, 1)).all():
        raise ParameterError(f"{name} must be binary")
    return arr.astype(np.int64)


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray
    tn: np.ndarray

    @property
    def classes(self) -> int:
        return len(self.tp)

    @property
    def n(self) -> int:
        return int(self.tp[0] + self.fp[0] + self.fn[0] + self.tn[0]) if self.classes else 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        if other.classes != self.classes:
            raise DimensionError("cannot add counts over different class sets")
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def to_record(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("tp", "fp", "fn", "tn")}


def confusion(preds, targets, K: int) -> ConfusionCounts:
    """Per-class counts of binary ``[N, K]`` predictions against binary targets."""
    p = _as_binary(preds, "preds")
    t = _as_binary(targets, "targets")
    if p.shape != t.shape:
        raise DimensionError(f"preds {p.shape} and targets {t.shape} differ")
    if p.shape[1] != K:
        raise DimensionError(f"expected {K} classes, got {p.shape[1]}")
    return ConfusionCounts(
        tp=((p == 1) & (t == 1)).sum(axis=0),
        fp=((p == 1) & (t == 0)).sum(axis=0),
        fn=((p == 0) & (t == 1)).sum(axis=0),
        tn=((p == 0) & (t == 0)).sum(axis=0),
    )


def _ratio(num, den) -> Fraction:
    return Fraction(int(num), int(den)) if den else Fraction(0)


def f1(a, b):
    return 2 * a * b / (a + b) if a + b else 0 * a


@dataclass
class MetricsReport:
    precision: List[float]
    recall: List[float]
    cp: float
    cr: float
    cf1: float
    op: float
    or_: float
    of1: float
    empty_classes: List[int] = field(default_factory=list)

    @property
    def warning(self) -> bool:
        """True when some class hit the 0/0 -> 0 convention."""
        return bool(self.empty_classes)

    def to_record(self, class_names: Optional[Sequence[str]] = None) -> dict:
        """Per-class precision as a fraction, aggregates scaled by 100."""
        names = list(class_names) if class_names is not None else [str(k) for k in range(len(self.precision))]
        rec = {"per_class_precision": dict(zip(names, self.precision))}
        for key in ("cp", "cr", "cf1", "op", "or_", "of1"):
            rec[key.rstrip("_").upper()] = 100.0 * getattr(self, key)
        rec["per_class_recall"] = dict(zip(names, self.recall))
        rec["zero_division_classes"] = [names[k] for k in self.empty_classes]
        return rec


def report(counts: ConfusionCounts) -> MetricsReport:
    """Macro CP/CR over classes, micro OP/OR over all pairs, and their F1s.

    Arithmetic is done in exact fractions and rounded once to float.
    """
    precision = [_ratio(tp, tp + fp) for tp, fp in zip(counts.tp, counts.fp)]
    recall = [_ratio(tp, tp + fn) for tp, fn in zip(counts.tp, counts.fn)]
    empty = [k for k in range(counts.classes)
             if counts.tp[k] + counts.fp[k] == 0 or counts.tp[k] + counts.fn[k] == 0]
    k = max(counts.classes, 1)
    cp, cr = sum(precision, Fraction(0)) / k, sum(recall, Fraction(0)) / k
    tp, fp, fn = counts.tp.sum(), counts.fp.sum(), counts.fn.sum()
    op, or_ = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
    return MetricsReport([float(v) for v in precision], [float(v) for v in recall], float(cp), float(cr),
                         float(f1(cp, cr)), float(op), float(or_), float(f1(op, or_)), empty)


def evaluate(probs, targets, threshold: float = 0.5) -> MetricsReport:
    p = binarize(probs, threshold)
    t = np.asarray(targets)
    return report(confusion(p, t, p.shape[-1]))


def printed_formulas(preds, targets) -> dict:
    """The aggregate formulas exactly as printed.

    CP/CR sum a per-class value over images and divide by ``N K``, which
    reduces to the class mean. OP divides the count of agreeing pairs
    (true negatives included) by ``N K``; OR divides the same count by the
    number of positive targets and can therefore exceed 1.
    """
    p = _as_binary(preds, "preds")
    t = _as_binary(targets, "targets")
    if p.shape != t.shape:
        raise DimensionError(f"preds {p.shape} and targets {t.shape} differ")
    base = report(confusion(p, t, p.shape[1]))
    agree = int((p == t).sum())
    op = _ratio(agree, p.size)
    or_ = _ratio(agree, t.sum())
    return {"CP": 100.0 * base.cp, "CR": 100.0 * base.cr, "CF1": 100.0 * base.cf1,
            "OP": 100.0 * float(op), "OR": 100.0 * float(or_), "OF1": 100.0 * float(f1(op, or_))}
