"""Divert-cache-train-on-demand scheduling and the training loop around it.

Mixed-source rounds are collated by the universal adapter, diverted into
per-dataset FIFO caches, and the engine trains on whichever cache first
holds a complete single-source batch. Caches are scanned round-robin,
starting after the last dataset served. Partial caches carry over between
epochs; short batches are never emitted.
"""
from __future__ import annotations

import logging
import math
import queue
import threading
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from unipar.data import AugmentationConfig, Dataset, RawSample, Split, augment
from unipar.errors import ContractError, DataError, NumericalError
from unipar.loss import AttributeWeights, LossRates, apply_lossrate, weighted_bce
from unipar.metrics import MetricsReport, evaluate
from unipar.numerics import AdamW, Rng, Tape, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class AdaptedSample:
    frames: np.ndarray  # [T, ch, H, W]
    labels_padded: np.ndarray  # [C_max]
    mask: np.ndarray  # [C_max], C leading ones
    source_id: str
    sample_uid: int
    origin_uid: int = -1


class UniversalAdapter:
    """Collation into the uniform sample format; owns the uid counter."""

    def __init__(self, registry: dict):
        self.registry = dict(registry)
        self.c_max = max((s.count for s in self.registry.values()), default=0)
        self._next_uid = 0

    def __call__(self, raw_batch: Iterable[RawSample]) -> list[AdaptedSample]:
        out = []
        for raw in raw_batch:
            spec = self.registry.get(raw.dataset_id)
            if spec is None:
                raise DataError(f"sample from unregistered dataset {raw.dataset_id!r}")
            labels = np.asarray(raw.labels, dtype=np.int8).reshape(-1)
            if labels.size != spec.count:
                raise DataError(f"{raw.dataset_id}: {labels.size} labels, expected {spec.count}")
            frames = raw.frames
            if isinstance(frames, (list, tuple)):
                # un-nest per-frame payloads into the T axis
                frames = np.stack([np.asarray(f) for f in frames])
            frames = np.asarray(frames)
            if frames.ndim == 3:
                frames = frames[None]
            padded = np.zeros(self.c_max, dtype=np.int8)
            padded[:spec.count] = labels
            mask = np.zeros(self.c_max, dtype=np.int8)
            mask[:spec.count] = 1
            out.append(AdaptedSample(frames, padded, mask, raw.dataset_id, self._next_uid, raw.origin_uid))
            self._next_uid += 1
        return out


def adapt(raw_batch, registry: dict) -> list[AdaptedSample]:
    return UniversalAdapter(registry)(raw_batch)


class FifoCache:
    """Single-producer / single-consumer FIFO of adapted samples."""

    def __init__(self, dataset_id: str, capacity_hint: int = 0):
        self.dataset_id = dataset_id
        self.capacity_hint = capacity_hint
        self._queue: deque = deque()
        self._lock = threading.Lock()

    def push(self, sample: AdaptedSample) -> None:
        with self._lock:
            self._queue.append(sample)

    def pop(self, n: int) -> list:
        with self._lock:
            if len(self._queue) < n:
                raise IndexError(f"cache {self.dataset_id!r} holds {len(self._queue)} < {n}")
            return [self._queue.popleft() for _ in range(n)]

    def __len__(self):
        return len(self._queue)

    def uids(self) -> list:
        with self._lock:
            return [s.sample_uid for s in self._queue]


@dataclass
class EngineState:
    caches: dict  # dataset_id -> FifoCache, registration order
    batch_size: int
    step_counter: int = 0
    cursor: int = -1  # index of the last dataset served
    epoch_ledger: Counter = field(default_factory=Counter)  # sample_uid -> times trained
    pushed: Counter = field(default_factory=Counter)  # dataset_id -> samples diverted

    @classmethod
    def create(cls, dataset_ids, batch_size: int) -> "EngineState":
        if batch_size < 1:
            raise ValueError("batch size must be >= 1")
        return cls({k: FifoCache(k, batch_size) for k in dataset_ids}, batch_size)

    def residual(self) -> dict:
        return {k: len(c) for k, c in self.caches.items()}


def divert(samples: Iterable[AdaptedSample], state: EngineState) -> None:
    for s in samples:
        cache = state.caches.get(s.source_id)
        if cache is None:
            raise DataError(f"no cache for dataset {s.source_id!r}")
        cache.push(s)
        state.pushed[s.source_id] += 1


def poll_ready(state: EngineState) -> list | None:
    ids = list(state.caches)
    k = len(ids)
    for step in range(1, k + 1):
        idx = (state.cursor + step) % k
        cache = state.caches[ids[idx]]
        if len(cache) >= state.batch_size:
            state.cursor = idx
            return cache.pop(state.batch_size)
    return None


@dataclass
class LrSchedule:
    """Per-step linear warmup, then cosine decay reaching 0 at the last step."""
    base_lr: float
    warmup_epochs: int
    total_epochs: int
    steps_per_epoch: int

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch

    def lr(self, step: int) -> float:
        w = self.warmup_steps
        if step < w:
            return self.base_lr * (step + 1) / w
        span = self.total_steps - 1 - w
        progress = 1.0 if span <= 0 else min((step - w) / span, 1.0)
        return self.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def nominal_steps_per_epoch(sizes: Iterable[int], batch_size: int) -> int:
    return max(1, sum(n // batch_size for n in sizes))


# ---------------------------------------------------------------- training


@dataclass
class Trainer:
    model: object  # ModelState
    optimizer: AdamW
    schedule: LrSchedule
    state: EngineState
    weights: dict  # dataset_id -> AttributeWeights
    rates: LossRates
    last_lr: float = 0.0
    lr_history: list = field(default_factory=list)

    def train_step(self, batch: list) -> float:
        return train_step(batch, self)


def train_step(batch: list, trainer: Trainer) -> float:
    """Forward, masked weighted loss, backward and one AdamW update on a pure batch."""
    sources = {s.source_id for s in batch}
    if len(sources) != 1:
        raise ContractError(f"mixed-source batch {sorted(sources)}: every batch must come from one dataset")
    if len(batch) != trainer.state.batch_size:
        raise ContractError(f"batch of {len(batch)} samples, engine batch size is {trainer.state.batch_size}")
    source = sources.pop()
    model = trainer.model
    count = model.specs[source].count
    frames = np.stack([s.frames for s in batch])
    labels = np.stack([s.labels_padded for s in batch])[:, :count]
    mask = np.stack([s.mask for s in batch])[:, :count]
    lr = trainer.schedule.lr(trainer.state.step_counter)
    trainer.optimizer.zero_grad()
    with Tape() as tape:
        probs = model.forward(frames, source, train=True)
        loss = weighted_bce(probs, labels, mask, trainer.weights[source])
        loss = apply_lossrate(loss, source, trainer.rates)
    value = loss.item()
    if not math.isfinite(value):
        raise NumericalError(f"non-finite loss {value} at step {trainer.state.step_counter} on {source!r}")
    backward(tape, loss)
    trainer.optimizer.step(lr)
    trainer.state.step_counter += 1
    trainer.last_lr = lr
    trainer.lr_history.append(lr)
    for s in batch:
        trainer.state.epoch_ledger[s.sample_uid] += 1
    return value


# ---------------------------------------------------------------- sampling


class MixedSampler:
    """Each round draws ``batch_size`` samples from every dataset not yet exhausted.

    An epoch is one pass over the union of training splits; the mixed batch
    of a round is shuffled so sources interleave.
    """

    def __init__(self, datasets: dict, batch_size: int, seed: int,
                 augmentation: AugmentationConfig | None = None):
        self.datasets = datasets  # dataset_id -> Dataset
        self.batch_size = batch_size
        self.rng = Rng(seed).fork("sampler")
        self.augmentation = augmentation
        self._train = {k: ds.split(Split.TRAIN) for k, ds in datasets.items()}

    def sizes(self) -> list:
        return [len(v) for v in self._train.values()]

    def rounds(self, epoch: int):
        orders = {k: [recs[i] for i in self.rng.fork(("order", epoch, k)).permutation(len(recs))]
                  for k, recs in self._train.items()}
        b = self.batch_size
        r = 0
        while True:
            mixed = []
            for k, recs in orders.items():
                for rec in recs[r * b:(r + 1) * b]:
                    raw = self.datasets[k].raw(rec)
                    if self.augmentation is not None and not self.augmentation.is_identity:
                        frames = augment(raw.frames, self.augmentation, self.rng.fork(("aug", epoch, rec.uid)))
                        raw = RawSample(raw.dataset_id, frames, raw.labels, raw.origin_uid)
                    mixed.append(raw)
            if not mixed:
                return
            perm = self.rng.fork(("mix", epoch, r)).permutation(len(mixed))
            yield [mixed[i] for i in perm]
            r += 1


def _drain(trainer: Trainer, losses: list) -> None:
    while True:
        batch = poll_ready(trainer.state)
        if batch is None:
            return
        losses.append((batch[0].source_id, trainer.train_step(batch)))


def run_epoch(trainer: Trainer, sampler: MixedSampler, adapter: UniversalAdapter, epoch: int,
              threaded: bool = False) -> list:
    """Train one epoch; returns ``[(dataset_id, loss), ...]`` in step order.

    In threaded mode a producer thread loads, augments and collates rounds
    while this thread diverts and trains. Rounds are handed over whole, so
    the batch sequence is identical to the single-threaded mode.
    """
    losses: list = []
    if not threaded:
        for mixed in sampler.rounds(epoch):
            divert(adapter(mixed), trainer.state)
            _drain(trainer, losses)
        return losses

    handoff: queue.Queue = queue.Queue(maxsize=2)
    failure: list = []
    stop = threading.Event()

    def produce():
        try:
            for mixed in sampler.rounds(epoch):
                item = adapter(mixed)
                while not stop.is_set():
                    try:
                        handoff.put(item, timeout=0.1)
                        break
                    except queue.Full:
                        continue
                if stop.is_set():
                    return
        except BaseException as exc:  # surfaced on the consumer side
            failure.append(exc)
        finally:
            handoff.put(None)

    worker = threading.Thread(target=produce, name="unipar-producer", daemon=True)
    worker.start()
    try:
        while True:
            item = handoff.get()
            if item is None:
                break
            divert(item, trainer.state)
            _drain(trainer, losses)
    finally:
        stop.set()
        # unblock a producer waiting on a full queue
        while worker.is_alive():
            try:
                handoff.get(timeout=0.05)
            except queue.Empty:
                pass
        worker.join()
    if failure:
        raise failure[0]
    return losses


# ---------------------------------------------------------------- evaluation


def eval_batches(dataset: Dataset, split=Split.VAL, batch_size: int = 32):
    records = dataset.split(split)
    for i in range(0, len(records), batch_size):
        chunk = records[i:i + batch_size]
        yield np.stack([dataset.frames(r) for r in chunk]), np.array([r.labels for r in chunk], dtype=np.int8)


def rotate_eval(dataset_ids, model, loaders: dict, threshold: float = 0.5) -> dict:
    """Evaluate each dataset in turn, strictly on its own loader, in EVAL mode.

    ``loaders`` maps dataset_id to a zero-argument callable returning an
    iterable of ``(frames [N, T, ch, H, W], labels [N, C])`` batches.
    """
    reports: dict[str, MetricsReport] = {}
    for dataset_id in dataset_ids:
        probs, labels = [], []
        with no_grad():
            for frames, y in loaders[dataset_id]():
                probs.append(np.asarray(model.forward(frames, dataset_id, train=False).data, dtype=np.float64))
                labels.append(np.asarray(y))
        count = model.specs[dataset_id].count
        p = np.concatenate(probs) if probs else np.zeros((0, count))
        y = np.concatenate(labels) if labels else np.zeros((0, count), dtype=np.int8)
        reports[dataset_id] = evaluate(dataset_id, p, y, threshold)
        if reports[dataset_id].empty:
            log.warning("dataset %s has an empty evaluation split", dataset_id)
    return reports
