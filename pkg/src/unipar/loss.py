"""Dataset-aware weighted binary cross-entropy."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from unipar.errors import DataError, RoutingError, ShapeError
from unipar.numerics import Tensor, clip, log, mul, neg, scale, shift, tsum

RATE_FLOOR = 1e-4
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class AttributeWeights:
    dataset_id: str | None
    w: np.ndarray
    r: np.ndarray


def compute_weights(positive_rates, dataset_id: str | None = None) -> AttributeWeights:
    """``w_j = ln(1 / r_j + 1)`` with ``r_j`` floored at 1e-4."""
    r = np.asarray(positive_rates, dtype=np.float64)
    if r.ndim != 1:
        raise ShapeError(f"positive rates must be a vector, got shape {r.shape}")
    if np.any(~np.isfinite(r)) or np.any(r < 0) or np.any(r > 1):
        raise DataError(f"positive rates must lie in [0, 1], got {r.tolist()}")
    r = np.clip(r, RATE_FLOOR, 1.0)
    return AttributeWeights(dataset_id, np.log(1.0 / r + 1.0), r)


def weighted_bce(probs: Tensor, labels, mask, weights: AttributeWeights) -> Tensor:
    """Mean over the batch of the masked, attribute-weighted BCE sum.

    Normalised by batch size only, so masked slots lower the loss rather than
    re-weighting the remaining ones.
    """
    y = np.asarray(labels)
    m = np.asarray(mask)
    if probs.ndim != 2 or y.shape != probs.shape or m.shape != probs.shape:
        raise ShapeError(f"probs {probs.shape}, labels {y.shape}, mask {m.shape} must agree as [B, C]")
    if weights.w.shape != (probs.shape[1],):
        raise ShapeError(f"{weights.w.shape[0]} attribute weights for {probs.shape[1]} attributes")
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    if not np.all((m == 0) | (m == 1)):
        raise DataError("mask must be 0 or 1")
    b = probs.shape[0]
    dt = probs.dtype
    coef = (m * weights.w[None, :]).astype(dt) / b
    p = clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = tsum(mul(log(p), Tensor(-coef * y, dtype=dt)))
    negative = tsum(mul(log(shift(neg(p), 1.0)), Tensor(-coef * (1 - y), dtype=dt)))
    return pos + negative


@dataclass
class LossRates:
    rates: dict = field(default_factory=dict)

    @classmethod
    def from_config(cls, dataset_ids, values=None) -> "LossRates":
        """``values`` is None (all 1.0), a sequence in registration order, or a mapping."""
        ids = list(dataset_ids)
        if values is None:
            return cls({k: 1.0 for k in ids})
        if isinstance(values, dict):
            unknown = set(values) - set(ids)
            if unknown:
                raise RoutingError(f"loss rates given for unknown datasets {sorted(unknown)}")
            return cls({k: float(values.get(k, 1.0)) for k in ids})
        values = list(values)
        if len(values) != len(ids):
            raise DataError(f"{len(values)} loss rates for {len(ids)} datasets")
        return cls({k: float(v) for k, v in zip(ids, values)})

    def __post_init__(self):
        for k, v in self.rates.items():
            if not v > 0:
                raise DataError(f"loss rate for {k!r} must be positive, got {v}")

    def rate(self, dataset_id) -> float:
        try:
            return self.rates[dataset_id]
        except KeyError:
            raise RoutingError(f"no loss rate for dataset {dataset_id!r}") from None


def apply_lossrate(loss: Tensor, dataset_id, rates: LossRates) -> Tensor:
    return scale(loss, rates.rate(dataset_id))
