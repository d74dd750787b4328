"""Acceptance suite: one test per criterion, each at its stated tolerance.

A PASS/FAIL line per criterion is printed in the terminal summary
(see conftest.py). Criteria 8-11 train the toy model; together they take under a minute
on one core.
"""
import dataclasses
import math
import time
from pathlib import Path

import numpy as np
import pytest

from oracles import (bce_loop, check_batches, instance_loop, mean_accuracy_loop, random_interleaving,
                     replay)
from toys import adapted_batch, tiny_trainer
from unipar import gradcheck_suite, pipeline
from unipar.config import load_config
from unipar.data import AugmentationConfig, RawSample, Split, generate_synthetic
from unipar.encoder import fuse
from unipar.loss import LossRates, apply_lossrate, compute_weights, weighted_bce
from unipar.metrics import ConfusionCounts, instance_metrics, mean_accuracy
from unipar.model import ModelState
from unipar.numerics import AdamW, Rng, Tape, Tensor, backward, precision
from unipar.scheduler import (EngineState, LrSchedule, Trainer, UniversalAdapter, nominal_steps_per_epoch,
                              train_step)

TOY = Path(__file__).resolve().parents[1] / "configs" / "toy.yaml"
PAPER = Path(__file__).resolve().parents[1] / "configs" / "paper.yaml"


def toy_model(dtype=None):
    cfg = load_config(TOY)
    model_cfg = cfg.model if dtype is None else dataclasses.replace(cfg.model, dtype=dtype)
    return ModelState(model_cfg, cfg.specs, seed=cfg.seed)


def toy_frames(model, dataset_id, n, seed):
    spec = model.specs[dataset_id]
    return Rng(seed).normal((n, spec.frames, spec.channels, spec.height, spec.width))


# ------------------------------------------------------------------ 1


@pytest.mark.criterion(1, "gradient correctness, every layer type and the toy pipeline, <= 1e-4 in < 60 s")
def test_criterion_01_gradients(record_property):
    start = time.perf_counter()
    results = gradcheck_suite.run()
    elapsed = time.perf_counter() - start
    worst = max(results, key=lambda r: r.max_rel_error)
    record_property("detail", f"worst {worst.component} {worst.max_rel_error:.2e}, {elapsed:.1f}s")
    assert {r.component for r in results} == {"patch_embed", "positional", "time_adapter", "encoder_layer",
                                              "fusion", "head", "loss", "pipeline"}
    assert all(r.max_rel_error <= 1e-4 for r in results), results
    assert elapsed < 60


# ------------------------------------------------------------------ 2


@pytest.mark.criterion(2, "visual features bit-identical under 100 query-set substitutions")
def test_criterion_02_phase_separation(record_property):
    model = toy_model()
    rng = Rng(2)
    inputs = {k: toy_frames(model, k, 2, i) for i, k in enumerate(model.specs)}
    reference = {k: model.encode(x, k).data.copy() for k, x in inputs.items()}
    ids = list(model.specs)
    changed = 0
    for trial in range(100):
        k = ids[trial % len(ids)]
        q = model.queries[k].queries
        before = model.attribute_features(inputs[k], k).data.copy()
        std = 0.01 * 10 ** (3 * rng.random())
        q.data[:] = 0.0 if trial % 10 == 0 else rng.normal(q.shape, std=std)
        after = model.attribute_features(inputs[k], k).data
        changed += not np.array_equal(before, after)
        for j, x in inputs.items():
            np.testing.assert_array_equal(model.encode(x, j).data, reference[j])
    record_property("detail", f"100 substitutions, attribute outputs changed in {changed}")
    # the substitutions are not no-ops: attribute outputs did move
    assert changed >= 90


# ------------------------------------------------------------------ 3


@pytest.mark.criterion(3, "permuting queries permutes attribute outputs, <= 1e-9 over 100 permutations")
def test_criterion_03_permutation_equivariance(record_property):
    with precision("float64"):
        model = toy_model("float64")
        rng = Rng(3)
        worst = 0.0
        for trial in range(100):
            k = list(model.specs)[trial % 3]
            qset = model.queries[k]
            qset.queries.data[:] = rng.normal(qset.queries.shape, std=0.5)
            f_vis = model.encode(toy_frames(model, k, 2, trial), k)
            _, base = fuse(f_vis, qset, model.fusion_layer)
            perm = rng.permutation(qset.count)
            qset.queries.data[:] = qset.queries.data[perm]
            _, permuted = fuse(f_vis, qset, model.fusion_layer)
            worst = max(worst, float(np.max(np.abs(permuted.data - base.data[:, perm]))))
    record_property("detail", f"max abs deviation {worst:.1e}")
    assert worst <= 1e-9


# ------------------------------------------------------------------ 4


@pytest.mark.criterion(4, "scheduler matches the reference simulator on 1000 interleavings")
def test_criterion_04_scheduler_oracle(record_property):
    rng = Rng(4)
    batches = 0
    for _ in range(1000):
        k = rng.integer(3, 6)
        b = [2, 4, 8][rng.integer(0, 3)]
        sources = [f"s{i}" for i in range(k)]
        pushes, chunks = random_interleaving(rng, sources, b, max_pushes=200)
        state, emitted = replay(sources, b, pushes, chunks)
        check_batches(sources, b, pushes, state, emitted)
        batches += len(emitted)
    record_property("detail", f"{batches} batches compared")


# ------------------------------------------------------------------ 5


@pytest.mark.criterion(5, "one train_step leaves other datasets' heads and queries with zero gradient")
def test_criterion_05_gradient_isolation(record_property):
    cfg = load_config(TOY)
    model = ModelState(cfg.model, cfg.specs, seed=cfg.seed)
    trainer = Trainer(
        model, AdamW(model.named_parameters(trainable_only=True)),
        LrSchedule(8e-3, 1, 2, 10), EngineState.create(model.specs, cfg.batch_size),
        {s.dataset_id: compute_weights(s.target_rates, s.dataset_id) for s in cfg.specs},
        LossRates.from_config(model.specs))
    adapter = UniversalAdapter(model.specs)
    checked = 0
    for source in model.specs:
        spec = model.specs[source]
        frames = toy_frames(model, source, cfg.batch_size, 5).astype(np.float32)
        labels = (Rng(6).uniform((cfg.batch_size, spec.count)) < 0.5).astype(np.int8)
        batch = adapter([RawSample(source, f, y) for f, y in zip(frames, labels)])
        train_step(batch, trainer)
        assert any(np.any(p.grad) for p in model.dataset_parameters(source).values())
        for other in model.specs:
            if other == source:
                continue
            for name, p in model.dataset_parameters(other).items():
                grad = p.grad_or_zeros()
                assert not np.any(grad), name
                checked += 1
    record_property("detail", f"{checked} foreign parameter tensors exactly zero")


# ------------------------------------------------------------------ 6


@pytest.mark.criterion(6, "loss weights, weighted BCE and loss-rate scaling match closed forms to 1e-12")
def test_criterion_06_loss_fidelity(record_property):
    rng = Rng(6)
    rates = np.concatenate([[1e-4, 1.0], 1e-4 + (1 - 1e-4) * rng.uniform(10_000 - 2)])
    w = compute_weights(rates).w
    worst_w = max(abs(float(wi) - math.log(1.0 / float(r) + 1.0)) for wi, r in zip(w, rates))
    assert worst_w <= 1e-12

    worst_bce = 0.0
    with precision("float64"):
        for _ in range(200):
            b, c = rng.integer(1, 9), rng.integer(1, 12)
            p = rng.uniform((b, c))
            y = (rng.uniform((b, c)) < 0.4).astype(int)
            m = (rng.uniform((b, c)) < 0.8).astype(int)
            aw = compute_weights(rng.uniform(c))
            got = weighted_bce(Tensor(p), y, m, aw).item()
            worst_bce = max(worst_bce, abs(got - bce_loop(p, y, m, aw.w)))
            unit = compute_weights(np.full(c, 1 / (math.e - 1)))
            plain = sum(-(y[i, j] * math.log(p[i, j]) + (1 - y[i, j]) * math.log(1 - p[i, j]))
                        for i in range(b) for j in range(c)) / b
            worst_bce = max(worst_bce, abs(weighted_bce(Tensor(p), y, np.ones_like(y), unit).item() - plain))
    assert worst_bce <= 1e-12

    # two backward passes through the full tiny model, rate 1 and rate 0.6
    trainer = tiny_trainer()
    model = trainer.model
    params = model.named_parameters(trainable_only=True)
    batch = adapted_batch(model, "evt", 4, seed=1)
    frames = np.stack([s.frames for s in batch]).astype(np.float64)
    labels = np.stack([s.labels_padded for s in batch])[:, :4]
    aw = trainer.weights["evt"]
    buffers = {k: v.copy() for k, v in model.named_buffers().items()}

    def grads(rate):
        for k, v in model.named_buffers().items():
            v[...] = buffers[k]
        model.zero_grad()
        with Tape() as tape:
            loss = weighted_bce(model.forward(frames, "evt", train=True), labels, np.ones_like(labels), aw)
            loss = apply_lossrate(loss, "evt", LossRates({"evt": rate}))
        backward(tape, loss)
        return {k: p.grad_or_zeros().copy() for k, p in params.items()}

    g1, g6 = grads(1.0), grads(0.6)
    flat1 = np.concatenate([g.ravel() for g in g1.values()])
    flat6 = np.concatenate([g.ravel() for g in g6.values()])
    global_scale = float(np.max(np.abs(flat1)))
    worst_rel = float(np.max(np.abs(flat6 - 0.6 * flat1))) / (0.6 * global_scale)
    # Per tensor as well, except tensors whose true gradient is zero (the fusion
    # output bias is cancelled by batch norm): their entries are pure roundoff.
    upstream = [k for k in g1 if not k.startswith(("stem.RGB.", "stem.VIDEO.", "queries.rgb.", "queries.vid.",
                                                      "head.rgb.", "head.vid."))]
    zero = []
    for k in upstream:
        scale = float(np.max(np.abs(g1[k])))
        if scale <= 1e-12 * global_scale:
            zero.append(k)
            continue
        worst_rel = max(worst_rel, float(np.max(np.abs(g6[k] - 0.6 * g1[k]))) / (0.6 * scale))
    record_property("detail", f"weights {worst_w:.1e}, bce {worst_bce:.1e}, rate scaling {worst_rel:.1e} "
                              f"over {len(upstream) - len(zero)} tensors; zero-gradient: {', '.join(zero) or 'none'}")
    assert zero == ["encoder.1.fc2_b"]
    assert worst_rel <= 1e-12


# ------------------------------------------------------------------ 7


@pytest.mark.criterion(7, "metrics match loop references on 500 instances; worked example 50/75/75/75")
def test_criterion_07_metrics_oracle(record_property):
    y = np.array([[1, 0, 1], [0, 1, 0]])
    yh = np.array([[1, 0, 0], [0, 1, 1]])
    assert instance_metrics(yh, y) == (50.0, 75.0, 75.0, 75.0)
    rng = Rng(7)
    edge = 0
    for trial in range(500):
        n, c = rng.integer(1, 21), rng.integer(1, 11)
        density = [0.0, 1.0, 0.1, 0.5, 0.9][trial % 5]
        labels = (rng.uniform((n, c)) < density).astype(np.int8)
        pred = (rng.uniform((n, c)) < rng.uniform(1)[0]).astype(np.int8)
        if trial % 7 == 0:
            labels[rng.integer(0, n)] = 0
            pred[rng.integer(0, n)] = 0
        got = instance_metrics(pred, labels)
        assert got == instance_loop(pred.tolist(), labels.tolist())
        ma, excluded = mean_accuracy(ConfusionCounts.from_predictions(pred, labels))
        assert ma == mean_accuracy_loop(pred.tolist(), labels.tolist())
        edge += bool(excluded) or not labels.any(axis=1).all()
    record_property("detail", f"500 instances exact, {edge} with empty sets or degenerate attributes")
    assert edge > 100


# ------------------------------------------------------------------ 8-11 (training)


@pytest.mark.criterion(8, "overfit 16 samples per dataset to >= 95 mA within 300 steps, < 5 min")
def test_criterion_08_overfit(tmp_path, record_property):
    cfg = load_config(TOY)
    for d in cfg.datasets:
        d.spec.train_size, d.spec.val_size = 16, 0
    cfg.epochs = 25  # 3 datasets x 16 / B=4 = 12 steps per epoch, 300 in total
    cfg.threaded = False
    cfg.data_dir = str(tmp_path)
    # memorising fixed samples: training sees them exactly as they are evaluated
    cfg.augmentation = AugmentationConfig(flip_prob=0.0)
    start = time.perf_counter()
    datasets = {d.spec.dataset_id: generate_synthetic(d.spec, cfg.seed, tmp_path, cfg.model.patch_size)
                for d in cfg.datasets}
    result = pipeline.train(cfg, datasets, eval_split=Split.TRAIN)
    elapsed = time.perf_counter() - start
    final = {k: r.mA for k, r in result.reports[-1].items()}
    steps = result.trainer.state.step_counter
    record_property("detail", f"train mA {', '.join(f'{k} {v:.1f}' for k, v in final.items())}; "
                              f"{steps} steps, {elapsed:.0f}s")
    assert steps <= 300
    assert all(v is not None and v >= 95.0 for v in final.values())
    assert elapsed < 300


def _full_run(root: Path):
    """The toy config exactly as shipped, run inside ``root`` (relative paths)."""
    cfg = load_config(TOY)
    with pytest.MonkeyPatch.context() as mp:
        mp.chdir(root)
        mp.delenv("UNIPAR_SEED", raising=False)
        start = time.perf_counter()
        pipeline.generate_all(cfg)
        result = pipeline.train(cfg, log_path=cfg.log_path, checkpoint_path=cfg.checkpoint)
        elapsed = time.perf_counter() - start
        ckpt = Path(cfg.checkpoint).read_bytes()
        log = Path(cfg.log_path).read_bytes()
    return cfg, result, elapsed, ckpt, log


@pytest.fixture(scope="module")
def full_runs(tmp_path_factory):
    first = _full_run(tmp_path_factory.mktemp("run_a"))
    second = _full_run(tmp_path_factory.mktemp("run_b"))
    return first, second


@pytest.mark.criterion(9, "full toy run: final loss <= 0.6 x first, one report per dataset per epoch, < 15 min")
def test_criterion_09_joint_training(full_runs, record_property):
    cfg, result, elapsed, _, log = full_runs[0]
    ratio = result.epoch_losses[-1] / result.epoch_losses[0]
    val = {k: r.mA for k, r in result.reports[-1].items()}
    record_property("detail", f"loss {result.epoch_losses[0]:.3f} -> {result.epoch_losses[-1]:.3f} "
                              f"(ratio {ratio:.3f}); val mA {', '.join(f'{k} {v:.1f}' for k, v in val.items())}; "
                              f"{elapsed:.0f}s")
    assert len(result.epoch_losses) == cfg.epochs == 10
    assert ratio <= 0.6
    assert len(result.reports) == cfg.epochs
    for reports in result.reports:
        assert list(reports) == cfg.dataset_ids
        assert all(r.samples == 50 and not r.empty for r in reports.values())
    rows = log.decode().splitlines()
    assert len(rows) == 1 + cfg.epochs * len(cfg.dataset_ids)
    assert elapsed < 15 * 60


@pytest.mark.criterion(10, "two identical runs give bit-identical checkpoints and metric logs")
def test_criterion_10_determinism(full_runs, record_property):
    (_, _, _, ckpt_a, log_a), (_, _, _, ckpt_b, log_b) = full_runs
    record_property("detail", f"checkpoint {len(ckpt_a)} bytes, log {len(log_a)} bytes")
    assert ckpt_a == ckpt_b
    assert log_a == log_b


def closed_form_lr(step, base, warmup_steps, total_steps):
    if step < warmup_steps:
        return base * (step + 1) / warmup_steps
    progress = (step - warmup_steps) / (total_steps - 1 - warmup_steps)
    return base * 0.5 * (1 + math.cos(math.pi * progress))


@pytest.mark.criterion(11, "lr: end of warmup 8e-3, final step <= 1e-6, closed form at every step")
def test_criterion_11_schedule(full_runs, record_property):
    cfg, result, *_ = full_runs[0]
    schedule = result.trainer.schedule
    trace = result.trainer.lr_history
    assert len(trace) == schedule.total_steps
    w, total = schedule.warmup_steps, schedule.total_steps
    for step, lr in enumerate(trace):
        assert math.isclose(lr, closed_form_lr(step, 8e-3, w, total), rel_tol=1e-12, abs_tol=1e-18)
    assert trace[w - 1] == 8e-3
    assert trace[-1] <= 1e-6
    paper = load_config(PAPER)
    sizes = [d.spec.train_size for d in paper.datasets]
    paper_sched = LrSchedule(paper.optimizer.base_lr, paper.warmup_epochs, paper.epochs,
                             nominal_steps_per_epoch(sizes, paper.batch_size))
    assert paper_sched.lr(paper_sched.warmup_steps - 1) == 8e-3
    assert paper_sched.lr(paper_sched.total_steps - 1) <= 1e-6
    record_property("detail", f"toy: lr[{w - 1}] = {trace[w - 1]:g}, lr[{total - 1}] = {trace[-1]:.1e}; "
                              f"paper-scale schedule checked too")
