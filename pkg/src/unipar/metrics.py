"""Multi-label PAR metrics: label-based mA and instance-based Acc/Prec/Recall/F1."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from unipar.numerics import Tensor


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def from_predictions(cls, predictions, labels) -> "ConfusionCounts":
        p = np.asarray(predictions).astype(bool)
        y = np.asarray(labels).astype(bool)
        if p.shape != y.shape:
            raise ValueError(f"predictions {p.shape} and labels {y.shape} differ")
        return cls((p & y).sum(0), (~p & ~y).sum(0), (p & ~y).sum(0), (~p & y).sum(0))

    @property
    def samples(self) -> int:
        return int((self.tp + self.tn + self.fp + self.fn)[0]) if self.tp.size else 0


@dataclass
class MetricsReport:
    dataset_id: str
    mA: float | None
    accuracy: float
    precision: float
    recall: float
    f1: float
    threshold: float
    counts: ConfusionCounts | None
    excluded_attributes: list = field(default_factory=list)
    samples: int = 0
    empty: bool = False
    flags: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"mA": self.mA, "accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}

    def format_block(self) -> str:
        if self.empty:
            return f"[{self.dataset_id}] empty validation split"
        ma = "n/a" if self.mA is None else f"{self.mA:.2f}"
        lines = [f"[{self.dataset_id}] samples={self.samples} threshold={self.threshold}",
                 f"  mA        {ma}",
                 f"  Accuracy  {self.accuracy:.2f}",
                 f"  Precision {self.precision:.2f}",
                 f"  Recall    {self.recall:.2f}",
                 f"  F1        {self.f1:.2f}"]
        if self.excluded_attributes:
            lines.append(f"  excluded  {','.join(map(str, self.excluded_attributes))}")
        return "\n".join(lines)

    def format_machine(self) -> list[str]:
        return [f"{self.dataset_id}\t{k}\t{'nan' if v is None else repr(float(v))}"
                for k, v in self.as_dict().items()]


def binarize(probs, threshold: float = 0.5) -> np.ndarray:
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    if isinstance(probs, Tensor):
        probs = probs.data
    return (np.asarray(probs) >= threshold).astype(np.int8)


def mean_accuracy(counts: ConfusionCounts):
    """Return ``(mA or None, excluded attribute indices)``.

    Attributes without positives or without negatives are left out of the
    mean instead of being smoothed. The mean is taken over exact fractions
    and rounded once, so it does not depend on attribute order.
    """
    pos = counts.tp + counts.fn
    neg = counts.tn + counts.fp
    keep = (pos > 0) & (neg > 0)
    excluded = [int(j) for j in np.flatnonzero(~keep)]
    if not keep.any():
        return None, excluded
    total = sum(Fraction(int(tp), int(p)) + Fraction(int(tn), int(n))
                for tp, p, tn, n in zip(counts.tp[keep], pos[keep], counts.tn[keep], neg[keep]))
    return float(100 * total / (2 * int(keep.sum()))), excluded


def instance_metrics(predictions, labels) -> tuple[float, float, float, float]:
    """Sample-averaged Jaccard accuracy, precision and recall, plus F1 of the averages.

    Each ratio is taken as 1 when its denominator is empty. Sums are exact
    (rational) so the result is independent of sample order.
    """
    p = np.asarray(predictions).astype(bool)
    y = np.asarray(labels).astype(bool)
    if p.shape != y.shape:
        raise ValueError(f"predictions {p.shape} and labels {y.shape} differ")
    if p.shape[0] == 0:
        return 0.0, 0.0, 0.0, 0.0
    inter = (p & y).sum(1)
    union = (p | y).sum(1)
    npred = p.sum(1)
    ntrue = y.sum(1)

    n = p.shape[0]

    def mean_ratio(num, den):
        total = sum(Fraction(int(a), int(b)) if b else Fraction(1) for a, b in zip(num, den))
        return float(100 * total / n)

    acc = mean_ratio(inter, union)
    prec = mean_ratio(inter, npred)
    rec = mean_ratio(inter, ntrue)
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return float(acc), float(prec), float(rec), float(f1)


def evaluate(dataset_id: str, probs, labels, threshold: float = 0.5) -> MetricsReport:
    labels = np.asarray(labels)
    if labels.shape[0] == 0:
        return MetricsReport(dataset_id, None, 0.0, 0.0, 0.0, 0.0, threshold, None,
                             empty=True, flags=["empty"])
    pred = binarize(probs, threshold)
    counts = ConfusionCounts.from_predictions(pred, labels)
    ma, excluded = mean_accuracy(counts)
    acc, prec, rec, f1 = instance_metrics(pred, labels)
    flags = [] if ma is not None else ["all-attributes-excluded"]
    return MetricsReport(dataset_id, ma, acc, prec, rec, f1, threshold, counts, excluded,
                         samples=int(labels.shape[0]), flags=flags)
