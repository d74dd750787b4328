"""End-to-end workflows: dataset generation, joint training, evaluation."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from unipar import checkpoint as ckpt_io
from unipar.config import RunConfig
from unipar.data import Dataset, Split, generate_synthetic, load_manifest
from unipar.errors import ConfigurationError, IncompatibleCheckpointError, NumericalError
from unipar.loss import LossRates, compute_weights
from unipar.model import ModelState
from unipar.numerics import AdamW
from unipar.scheduler import (EngineState, LrSchedule, MixedSampler, Trainer, UniversalAdapter,
                              eval_batches, nominal_steps_per_epoch, rotate_eval, run_epoch)

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "dataset_id", "loss", "mA", "accuracy", "precision", "recall", "f1", "lr")


def manifest_path(cfg: RunConfig, dataset_id: str) -> Path:
    return Path(cfg.data_dir) / f"{dataset_id}.manifest"


def generate_all(cfg: RunConfig, force: bool = False) -> dict:
    """Generate every registered dataset; refuses to overwrite unless ``force``."""
    existing = [manifest_path(cfg, i) for i in cfg.dataset_ids if manifest_path(cfg, i).exists()]
    if existing and not force:
        raise FileExistsError(f"dataset files already exist ({existing[0]}); pass --force to regenerate")
    return {d.spec.dataset_id: generate_synthetic(d.spec, cfg.seed, cfg.data_dir, cfg.model.patch_size)
            for d in cfg.datasets}


def load_datasets(cfg: RunConfig) -> dict:
    out = {}
    for d in cfg.datasets:
        path = manifest_path(cfg, d.spec.dataset_id)
        if not path.exists():
            raise FileNotFoundError(f"dataset {d.spec.dataset_id!r} not found at {path}; run gen-data first")
        ds = load_manifest(path)
        if ds.spec.count != d.spec.count or ds.spec.modality != d.spec.modality:
            raise ConfigurationError(f"{path} does not match the configured spec for {d.spec.dataset_id!r}")
        out[d.spec.dataset_id] = ds
    return out


def build_model(cfg: RunConfig, datasets: dict) -> ModelState:
    specs = [datasets[i].spec for i in cfg.dataset_ids]
    return ModelState(cfg.model, specs, cfg.seed,
                      {d.spec.dataset_id: d.query_mode for d in cfg.datasets},
                      {d.spec.dataset_id: d.query_file for d in cfg.datasets if d.query_file})


@dataclass
class TrainResult:
    model: ModelState
    trainer: Trainer
    log_rows: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)  # mean loss per epoch
    reports: list = field(default_factory=list)  # per epoch: {dataset_id: MetricsReport}


def make_trainer(cfg: RunConfig, model: ModelState, datasets: dict) -> Trainer:
    sizes = [len(datasets[i].split(Split.TRAIN)) for i in cfg.dataset_ids]
    schedule = LrSchedule(cfg.optimizer.base_lr, cfg.warmup_epochs, cfg.epochs,
                          nominal_steps_per_epoch(sizes, cfg.batch_size))
    optimizer = AdamW(model.named_parameters(trainable_only=True), cfg.optimizer.weight_decay,
                      tuple(cfg.optimizer.betas), cfg.optimizer.eps,
                      lr_scales={"encoder.": cfg.optimizer.encoder_lr_scale})
    weights = {i: compute_weights(datasets[i].spec.positive_rates, i) for i in cfg.dataset_ids}
    return Trainer(model, optimizer, schedule, EngineState.create(cfg.dataset_ids, cfg.batch_size),
                   weights, LossRates.from_config(cfg.dataset_ids, cfg.loss_rates))


def _loaders(cfg: RunConfig, datasets: dict, split) -> dict:
    return {i: (lambda ds=datasets[i]: eval_batches(ds, split, cfg.eval_batch_size)) for i in cfg.dataset_ids}


def _fmt(v) -> str:
    return "nan" if v is None else repr(float(v))


def train(cfg: RunConfig, datasets: dict | None = None, log_path=None, checkpoint_path=None,
          eval_split=Split.VAL, on_epoch=None) -> TrainResult:
    """Joint training with per-epoch rotational evaluation and checkpointing.

    The checkpoint is rewritten after each completed epoch, so a numerical
    failure leaves the last good one in place. ``on_epoch(epoch, rows)`` is
    called with the epoch's log rows once they are written.
    """
    datasets = datasets if datasets is not None else load_datasets(cfg)
    model = build_model(cfg, datasets)
    trainer = make_trainer(cfg, model, datasets)
    adapter = UniversalAdapter({i: datasets[i].spec for i in cfg.dataset_ids})
    aug = None if cfg.augmentation.is_identity else cfg.augmentation
    sampler = MixedSampler({i: datasets[i] for i in cfg.dataset_ids}, cfg.batch_size, cfg.seed, aug)
    result = TrainResult(model, trainer)
    log_path = Path(log_path) if log_path else None
    if log_path:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("\t".join(LOG_COLUMNS) + "\n")
    loaders = _loaders(cfg, datasets, eval_split)
    for epoch in range(cfg.epochs):
        losses = run_epoch(trainer, sampler, adapter, epoch, threaded=cfg.threaded)
        values = [v for _, v in losses]
        result.epoch_losses.append(float(np.mean(values)) if values else math.nan)
        reports = rotate_eval(cfg.dataset_ids, model, loaders, cfg.threshold)
        result.reports.append(reports)
        rows = []
        for i in cfg.dataset_ids:
            own = [v for k, v in losses if k == i]
            r = reports[i]
            rows.append([str(epoch), i, _fmt(np.mean(own) if own else None), _fmt(r.mA), _fmt(r.accuracy),
                         _fmt(r.precision), _fmt(r.recall), _fmt(r.f1), _fmt(trainer.last_lr)])
        result.log_rows.extend(rows)
        if log_path:
            with open(log_path, "a") as fh:
                fh.writelines("\t".join(row) + "\n" for row in rows)
        log.info("epoch %d: mean loss %.4f, lr %.3g", epoch, result.epoch_losses[-1], trainer.last_lr)
        if checkpoint_path:
            save_checkpoint(cfg, trainer, checkpoint_path)
        if on_epoch is not None:
            on_epoch(epoch, rows)
    return result


def save_checkpoint(cfg: RunConfig, trainer: Trainer, path) -> None:
    ckpt = ckpt_io.capture(trainer.model, trainer.optimizer, cfg.to_dict(),
                           trainer.state.step_counter, trainer.state.cursor)
    ckpt_io.save(ckpt, path)


def model_from_checkpoint(path, datasets: dict | None = None):
    """Rebuild the model described by a checkpoint's config echo and load its weights."""
    ckpt = ckpt_io.load(path)
    cfg = RunConfig.from_dict(ckpt.config)
    if datasets is None:
        datasets = load_datasets(cfg)
    for i in cfg.dataset_ids:
        if i in datasets:
            want = cfg.datasets[cfg.dataset_ids.index(i)].spec.count
            have = datasets[i].spec.count
            if want != have:
                raise IncompatibleCheckpointError(
                    f"checkpoint head for {i!r} has {want} attributes, dataset has {have}")
    model = build_model(cfg, {i: datasets[i] for i in cfg.dataset_ids})
    ckpt_io.restore(ckpt, model)
    return cfg, model, ckpt


def evaluate_checkpoint(path, dataset_ids=None, data_dir=None, split=Split.VAL):
    ckpt = ckpt_io.load(path)
    cfg = RunConfig.from_dict(ckpt.config)
    if data_dir is not None:
        cfg.data_dir = str(data_dir)
    ids = list(dataset_ids) if dataset_ids else cfg.dataset_ids
    unknown = [i for i in ids if i not in cfg.dataset_ids]
    if unknown:
        raise ConfigurationError(f"unknown dataset(s) {unknown}; checkpoint knows {cfg.dataset_ids}")
    datasets = {}
    for i in cfg.dataset_ids:
        p = manifest_path(cfg, i)
        if p.exists():
            datasets[i] = load_manifest(p)
    missing = [i for i in cfg.dataset_ids if i not in datasets]
    if missing:
        raise FileNotFoundError(f"dataset(s) {missing} not found under {cfg.data_dir}")
    _, model, _ = model_from_checkpoint(path, datasets)
    return rotate_eval(ids, model, _loaders(cfg, datasets, split), cfg.threshold)
