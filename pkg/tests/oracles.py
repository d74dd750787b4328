"""Slow, loop-based reference implementations used only by the tests."""
import math
from collections import deque
from fractions import Fraction

import numpy as np

from unipar.scheduler import AdaptedSample, EngineState, divert, poll_ready


def bce_loop(probs, labels, mask, weights, clamp=1e-7):
    b = len(probs)
    total = 0.0
    for i in range(b):
        for j in range(len(probs[i])):
            if not mask[i][j]:
                continue
            p = min(max(float(probs[i][j]), clamp), 1.0 - clamp)
            y = int(labels[i][j])
            total += float(weights[j]) * (-y * math.log(p) - (1 - y) * math.log(1.0 - p))
    return total / b


def mean_accuracy_loop(pred, labels):
    n, c = len(labels), len(labels[0]) if len(labels) else 0
    per_attr = []
    for j in range(c):
        tp = tn = fp = fn = 0
        for i in range(n):
            p, y = pred[i][j], labels[i][j]
            if p and y:
                tp += 1
            elif not p and not y:
                tn += 1
            elif p:
                fp += 1
            else:
                fn += 1
        if tp + fn == 0 or tn + fp == 0:
            continue
        per_attr.append(Fraction(1, 2) * (Fraction(tp, tp + fn) + Fraction(tn, tn + fp)))
    if not per_attr:
        return None
    return float(100 * sum(per_attr) / len(per_attr))


def instance_loop(pred, labels):
    n = len(labels)
    if n == 0:
        return 0.0, 0.0, 0.0, 0.0
    # exact rational sums, rounded once at the end
    acc = prec = rec = Fraction(0)
    for i in range(n):
        y = {j for j, v in enumerate(labels[i]) if v}
        yh = {j for j, v in enumerate(pred[i]) if v}
        inter = len(y & yh)
        acc += Fraction(inter, len(y | yh)) if y | yh else 1
        prec += Fraction(inter, len(yh)) if yh else 1
        rec += Fraction(inter, len(y)) if y else 1
    acc, prec, rec = (float(100 * v / n) for v in (acc, prec, rec))
    f1 = 2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0
    return acc, prec, rec, f1


class ReferenceScheduler:
    """Direct restatement of the caching rules: one deque per source, round-robin
    scan starting after the last source served, oldest B samples out."""

    def __init__(self, sources, batch_size):
        self.sources = list(sources)
        self.b = batch_size
        self.queues = {s: deque() for s in self.sources}
        self.last = -1
        self.pushed = 0
        self.trained = 0

    def push(self, source, uid):
        self.queues[source].append(uid)
        self.pushed += 1

    def poll(self):
        k = len(self.sources)
        for offset in range(1, k + 1):
            idx = (self.last + offset) % k
            q = self.queues[self.sources[idx]]
            if len(q) >= self.b:
                self.last = idx
                self.trained += self.b
                return self.sources[idx], [q.popleft() for _ in range(self.b)]
        return None

    def residual(self):
        return sum(len(q) for q in self.queues.values())


def fake_sample(source, uid):
    return AdaptedSample(np.zeros((1, 1, 1, 1)), np.zeros(1), np.ones(1), source, uid)


def replay(sources, b, pushes, chunks):
    """Feed one push sequence, in chunks, to the engine and the reference.

    After each chunk both are polled until empty and must emit the same
    batches. Returns the engine state and the emitted batches.
    """
    state = EngineState.create(sources, b)
    ref = ReferenceScheduler(sources, b)
    emitted = []
    pos = 0
    for size in chunks:
        chunk = pushes[pos:pos + size]
        pos += size
        divert([fake_sample(s, uid) for uid, s in chunk], state)
        for uid, s in chunk:
            ref.push(s, uid)
        while True:
            got = poll_ready(state)
            want = ref.poll()
            if got is None or want is None:
                assert got is None and want is None, (got, want)
                break
            assert (got[0].source_id, [x.sample_uid for x in got]) == want
            emitted.append(got)
    assert ref.residual() == sum(state.residual().values())
    return state, emitted


def random_interleaving(rng, sources, b, max_pushes=120):
    n = rng.integer(0, max_pushes)
    pushes = [(uid, sources[rng.integer(0, len(sources))]) for uid in range(n)]
    chunks = []
    while sum(chunks) < n:
        chunks.append(rng.integer(1, 3 * b))
    return pushes, chunks


def check_batches(sources, b, pushes, state, emitted):
    """Purity, size, per-source FIFO and conservation."""
    assert all(len(batch) == b and len({x.source_id for x in batch}) == 1 for batch in emitted)
    assert sum(len(batch) for batch in emitted) + sum(state.residual().values()) == len(pushes)
    for s in sources:
        consumed = [x.sample_uid for batch in emitted for x in batch if x.source_id == s]
        pushed = [uid for uid, src in pushes if src == s]
        assert consumed == pushed[:len(consumed)]
        assert state.residual()[s] == len(pushed) % b
