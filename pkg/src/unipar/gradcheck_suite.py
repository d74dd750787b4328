"""Finite-difference checks for every layer type and the end-to-end toy pipeline.

All checks run in float64 at toy dims: d=8, L=3, 2 heads, n=4 patches,
C<=3, B=4. The probe loss is ``sum(output * R)`` for a fixed random ``R``
unless the component already ends in a scalar.
"""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from unipar.data import DatasetSpec
from unipar.embeddings import ModalityKind, ModalityStem, PositionalTables, TimeAdapter, add_positional, apply_time_adapter, patch_embed
from unipar.encoder import EncoderLayer, build_attribute_queries, fuse
from unipar.head import DatasetHead, predict
from unipar.loss import LossRates, apply_lossrate, compute_weights, weighted_bce
from unipar.model import ModelConfig, ModelState
from unipar.numerics import Rng, Tensor, mul, parameter, precision, tsum
from unipar.numerics.gradcheck import check_gradients

TOLERANCE = 1e-4
DIM, HEADS, B = 8, 2, 4
H = W = 8
P = 4  # -> n = 4 patches


@dataclass
class CheckResult:
    component: str
    max_rel_error: float
    worst_parameter: str
    seconds: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= TOLERANCE


def _probe(out: Tensor, rng: Rng) -> Tensor:
    return tsum(mul(out, Tensor(rng.normal(out.shape))))


def _patch_embed(rng):
    stem = ModalityStem.create(ModalityKind.EVENT, P, 3, DIM, rng.fork("stem"))
    stem.bias.data[:] = rng.normal(DIM, std=0.1)
    frames = rng.normal((B, 2, 3, H, W))
    return (lambda: _probe(patch_embed(frames, stem), rng.fork("R"))), stem.parameters()


def _positional(rng):
    tables = PositionalTables.create(4, 3, DIM, rng.fork("tables"))
    tokens = parameter(rng.normal((B, 2, 4, DIM)))
    params = {"tokens": tokens, **tables.parameters()}
    return (lambda: _probe(add_positional(tokens, tables, ModalityKind.EVENT), rng.fork("R"))), params


def _time_adapter(rng):
    adapter = TimeAdapter.create(3, DIM, rng.fork("adapter"))
    adapter.b1.data[:] = rng.normal(adapter.b1.shape, std=0.1)
    tokens = parameter(rng.normal((B, 3, 4, DIM)))
    params = {"tokens": tokens, **adapter.parameters()}
    return (lambda: _probe(apply_time_adapter(tokens, adapter), rng.fork("R"))), params


def _perturbed_layer(rng):
    layer = EncoderLayer.create(DIM, HEADS, rng.fork("layer"))
    # move off the init so attention is not near-uniform and biases matter
    for p in layer.parameters().values():
        p.data += rng.normal(p.shape, std=0.3)
    return layer


def _encoder_layer(rng):
    layer = _perturbed_layer(rng)
    x = parameter(rng.normal((B, 4, DIM)))
    return (lambda: _probe(layer(x), rng.fork("R"))), {"x": x, **layer.parameters()}


def _fusion(rng):
    layer = _perturbed_layer(rng)
    queries = build_attribute_queries("a", 3, DIM, "LEARNABLE", rng.fork("q"))
    queries.queries.data += rng.normal(queries.queries.shape, std=0.5)
    f_vis = parameter(rng.normal((B, 4, DIM)))

    def f():
        vis, attr = fuse(f_vis, queries, layer)
        return _probe(vis, rng.fork("Rv")) + _probe(attr, rng.fork("Ra"))

    params = {"f_vis": f_vis, "queries": queries.queries, **layer.parameters()}
    return f, params


def _head(rng):
    head = DatasetHead.create("a", 3, DIM, rng.fork("head"))
    head.bn_gain.data[:] = 1.0 + rng.normal(3, std=0.2)
    head.bn_bias.data[:] = rng.normal(3, std=0.2)
    f_in = parameter(rng.normal((B, 3, DIM)))
    return (lambda: _probe(predict(head, f_in, train=True), rng.fork("R"))), {"f": f_in, **head.parameters()}


def _loss(rng):
    probs = parameter(0.05 + 0.9 * rng.uniform((B, 3)))
    labels = (rng.uniform((B, 3)) < 0.5).astype(np.int8)
    mask = np.ones((B, 3), dtype=np.int8)
    mask[0, 2] = 0
    weights = compute_weights([0.5, 0.2, 0.05])
    rates = LossRates({"a": 0.8})
    return (lambda: apply_lossrate(weighted_bce(probs, labels, mask, weights), "a", rates)), {"probs": probs}


def _pipeline(rng):
    cfg = ModelConfig(dim=DIM, depth=3, heads=HEADS, patch_size=P, height=H, width=W, channels=3,
                      max_frames=2, dtype="float64")
    specs = [
        DatasetSpec("rgb", "rgb", ModalityKind.RGB, ["a", "b", "c"], 1, H, W, 3, 4, 0, [0.5] * 3, [0.5, 0.25, 0.75]),
        DatasetSpec("evt", "evt", ModalityKind.EVENT, ["a", "b"], 2, H, W, 3, 4, 0, [0.5] * 2, [0.5, 0.25]),
    ]
    model = ModelState(cfg, specs, seed=605)
    # at init the attention gradients are ~1e-7, inside finite-difference noise
    for name, p in model.named_parameters(trainable_only=True).items():
        if name.startswith(("encoder.", "queries.", "head.")):
            p.data += rng.normal(p.shape, std=0.3)
    inputs = {s.dataset_id: rng.normal((B, s.frames, 3, H, W)) for s in specs}
    labels = {s.dataset_id: (rng.uniform((B, s.count)) < 0.5).astype(np.int8) for s in specs}
    weights = {s.dataset_id: compute_weights(s.positive_rates) for s in specs}
    rates = LossRates({"rgb": 0.8, "evt": 0.6})

    def f():
        total = None
        for s in specs:
            k = s.dataset_id
            probs = model.forward(inputs[k], k, train=True)
            loss = apply_lossrate(weighted_bce(probs, labels[k], np.ones_like(labels[k]), weights[k]), k, rates)
            total = loss if total is None else total + loss
        return total

    return f, model.named_parameters(trainable_only=True)


COMPONENTS: dict[str, Callable] = {
    "patch_embed": _patch_embed,
    "positional": _positional,
    "time_adapter": _time_adapter,
    "encoder_layer": _encoder_layer,
    "fusion": _fusion,
    "head": _head,
    "loss": _loss,
    "pipeline": _pipeline,
}


def run(components=None, seed: int = 605, h: float = 1e-5) -> list[CheckResult]:
    names = list(COMPONENTS) if not components else list(components)
    unknown = [n for n in names if n not in COMPONENTS]
    if unknown:
        raise KeyError(f"unknown gradcheck component(s) {unknown}; choose from {list(COMPONENTS)}")
    results = []
    with precision("float64"):
        for name in names:
            start = time.perf_counter()
            f, params = COMPONENTS[name](Rng(seed).fork(name))
            errors = check_gradients(f, params, h)
            worst = max(errors, key=errors.get)
            results.append(CheckResult(name, errors[worst], worst, time.perf_counter() - start))
    return results
