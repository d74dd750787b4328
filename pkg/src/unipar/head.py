"""Per-dataset classification heads: linear (no bias) -> batch norm -> sigmoid."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from unipar.errors import ContractError, RoutingError, ShapeError
from unipar.numerics import (Rng, Tensor, batch_norm, clip, mul, parameter, reshape, sigmoid,
                             tsum)

log = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


@dataclass
class DatasetHead:
    dataset_id: str
    weight: Tensor  # [C, d]; row j scores attribute j
    bn_gain: Tensor
    bn_bias: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, dataset_id: str, count: int, dim: int, rng: Rng) -> "DatasetHead":
        w = parameter(rng.normal((count, dim), std=0.02))
        dtype = w.dtype
        return cls(dataset_id, w, parameter(np.ones(count)), parameter(np.zeros(count)),
                   np.zeros(count, dtype=dtype), np.ones(count, dtype=dtype))

    @property
    def count(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bn_gain": self.bn_gain, "bn_bias": self.bn_bias}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"running_mean": self.running_mean, "running_var": self.running_var}


def predict(head: DatasetHead, f: Tensor, train: bool) -> Tensor:
    """Attribute tokens ``f[B, C, d]`` -> probabilities ``[B, C]``.

    TRAIN normalises with batch statistics and updates the running stats;
    EVAL uses the running stats and mutates nothing.
    """
    if f.ndim != 3 or f.shape[1:] != head.weight.shape:
        raise ShapeError(f"head {head.dataset_id!r} expects [B, {head.count}, {head.weight.shape[1]}], got {f.shape}")
    b, c, d = f.shape
    logits = tsum(mul(f, reshape(head.weight, (1, c, d))), axis=-1)
    if train:
        if b < 2:
            raise ContractError("TRAIN-mode batch norm needs at least 2 samples in the batch")
        normed, mu, var = batch_norm(logits, head.bn_gain, head.bn_bias, head.eps)
        m = head.momentum
        head.running_mean *= 1.0 - m
        head.running_mean += m * mu
        head.running_var *= 1.0 - m
        head.running_var += m * var * (b / (b - 1))
    else:
        inv = 1.0 / np.sqrt(head.running_var + head.eps)
        shift_ = Tensor((-head.running_mean * inv).reshape(1, c), dtype=logits.dtype)
        normed = mul(logits, Tensor(inv.reshape(1, c), dtype=logits.dtype)) + shift_
        normed = mul(normed, reshape(head.bn_gain, (1, c))) + reshape(head.bn_bias, (1, c))
    probs = sigmoid(normed)
    # keep probabilities strictly inside (0, 1) even when the sigmoid saturates
    fi = np.finfo(probs.dtype)
    return clip(probs, float(fi.tiny), float(1.0 - fi.epsneg))


@dataclass
class HeadRegistry:
    heads: dict = field(default_factory=dict)  # dataset_id -> DatasetHead
    count_index: dict = field(default_factory=dict)  # attribute count -> [dataset_id]
    _warned: set = field(default_factory=set)

    def register(self, head: DatasetHead) -> None:
        if head.dataset_id in self.heads:
            raise ValueError(f"head for {head.dataset_id!r} already registered")
        self.heads[head.dataset_id] = head
        self.count_index.setdefault(head.count, []).append(head.dataset_id)

    def __getitem__(self, dataset_id) -> DatasetHead:
        return self.heads[dataset_id]

    def __iter__(self):
        return iter(self.heads.values())

    def __len__(self):
        return len(self.heads)


def route(registry: HeadRegistry, query_count: int, dataset_id: str) -> DatasetHead:
    """Pick the head by attribute count; fall back to ``dataset_id`` when counts collide."""
    candidates = registry.count_index.get(query_count)
    if not candidates:
        raise RoutingError(f"no head has {query_count} attributes (known counts: {sorted(registry.count_index)})")
    if dataset_id not in registry.heads:
        raise RoutingError(f"unknown dataset {dataset_id!r}; known: {list(registry.heads)}")
    if len(candidates) == 1:
        chosen = candidates[0]
        if chosen != dataset_id:
            raise RoutingError(f"{query_count} query tokens route to {chosen!r}, not {dataset_id!r}")
        return registry.heads[chosen]
    if dataset_id not in candidates:
        raise RoutingError(f"dataset {dataset_id!r} does not have {query_count} attributes")
    if query_count not in registry._warned:
        registry._warned.add(query_count)
        log.warning("attribute count %d shared by %s; routing by dataset id", query_count, candidates)
    return registry.heads[dataset_id]
