"""Run configuration (YAML on disk)."""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from unipar.data import AugmentationConfig, DatasetSpec
from unipar.encoder import QueryMode
from unipar.errors import ConfigurationError
from unipar.model import ModelConfig

DEFAULT_SEED = 605


@dataclass
class OptimizerConfig:
    base_lr: float = 8e-3
    weight_decay: float = 1e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    # multiplier on the scheduled lr for the shared transformer layers
    encoder_lr_scale: float = 1.0


@dataclass
class DatasetEntry:
    spec: DatasetSpec
    query_mode: str = QueryMode.LEARNABLE.value
    query_file: str | None = None


@dataclass
class RunConfig:
    datasets: list  # [DatasetEntry], registration order
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    epochs: int = 10
    warmup_epochs: int = 1
    batch_size: int = 4
    loss_rates: list | None = None
    seed: int = DEFAULT_SEED
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    data_dir: str = "data"
    checkpoint: str = "runs/model.ckpt"
    log_path: str = "runs/train_log.tsv"
    eval_batch_size: int = 32
    threshold: float = 0.5
    threaded: bool = True
    desk_runnable: bool = True

    def __post_init__(self):
        if self.loss_rates is None:
            self.loss_rates = [1.0] * len(self.datasets)
        self.validate()

    def validate(self) -> None:
        if not self.datasets:
            raise ConfigurationError("config registers no datasets")
        ids = [d.spec.dataset_id for d in self.datasets]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"duplicate dataset ids in {ids}")
        if len(self.loss_rates) != len(self.datasets):
            raise ConfigurationError(f"{len(self.loss_rates)} loss rates for {len(self.datasets)} datasets")
        if self.optimizer.base_lr <= 0 or self.optimizer.encoder_lr_scale <= 0:
            raise ConfigurationError("base_lr and encoder_lr_scale must be positive")
        if self.batch_size < 2:
            raise ConfigurationError("batch_size must be >= 2 (training-mode batch norm)")
        if self.epochs < 1 or not 0 <= self.warmup_epochs <= self.epochs:
            raise ConfigurationError(f"bad schedule: epochs={self.epochs}, warmup_epochs={self.warmup_epochs}")
        self.model.validate()
        for d in self.datasets:
            d.spec.validate(self.model.patch_size)
            QueryMode(d.query_mode)

    @property
    def dataset_ids(self) -> list:
        return [d.spec.dataset_id for d in self.datasets]

    @property
    def specs(self) -> list:
        return [d.spec for d in self.datasets]

    def subset(self, ids) -> "RunConfig":
        """Copy restricted to ``ids`` (kept in registration order)."""
        known = self.dataset_ids
        unknown = [i for i in ids if i not in known]
        if unknown:
            raise ConfigurationError(f"unknown datasets {unknown}; known: {known}")
        keep = [i for i, k in enumerate(known) if k in ids]
        return dataclasses.replace(self, datasets=[self.datasets[i] for i in keep],
                                   loss_rates=[self.loss_rates[i] for i in keep])

    # ------------------------------------------------------------ (de)serialisation

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "epochs": self.epochs,
            "warmup_epochs": self.warmup_epochs,
            "batch_size": self.batch_size,
            "loss_rates": [float(r) for r in self.loss_rates],
            "data_dir": self.data_dir,
            "checkpoint": self.checkpoint,
            "log_path": self.log_path,
            "eval_batch_size": self.eval_batch_size,
            "threshold": self.threshold,
            "threaded": self.threaded,
            "desk_runnable": self.desk_runnable,
            "model": dataclasses.asdict(self.model),
            "optimizer": {**dataclasses.asdict(self.optimizer), "betas": list(self.optimizer.betas)},
            "augmentation": {**dataclasses.asdict(self.augmentation),
                             "crop": None if self.augmentation.crop is None else list(self.augmentation.crop),
                             "erase_area": list(self.augmentation.erase_area),
                             "erase_aspect": list(self.augmentation.erase_aspect)},
            "datasets": [
                {
                    "dataset_id": d.spec.dataset_id, "name": d.spec.name, "modality": d.spec.modality.value,
                    "attributes": list(d.spec.attribute_names), "frames": d.spec.frames,
                    "height": d.spec.height, "width": d.spec.width, "channels": d.spec.channels,
                    "train_size": d.spec.train_size, "val_size": d.spec.val_size,
                    "target_rates": list(d.spec.target_rates),
                    "query_mode": d.query_mode, "query_file": d.query_file,
                }
                for d in self.datasets
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        model = ModelConfig(**raw.pop("model", {}))
        opt = raw.pop("optimizer", {})
        if "betas" in opt:
            opt["betas"] = tuple(opt["betas"])
        aug = dict(raw.pop("augmentation", {}))
        for key in ("crop", "erase_area", "erase_aspect"):
            if aug.get(key) is not None:
                aug[key] = tuple(aug[key])
        entries = []
        for d in raw.pop("datasets", []):
            d = dict(d)
            entry_kw = {"query_mode": d.pop("query_mode", QueryMode.LEARNABLE.value),
                        "query_file": d.pop("query_file", None)}
            d.setdefault("height", model.height)
            d.setdefault("width", model.width)
            d.setdefault("channels", model.channels)
            d["attribute_names"] = d.pop("attributes")
            try:
                spec = DatasetSpec(**d)
            except TypeError as exc:
                raise ConfigurationError(f"dataset entry {d.get('dataset_id')!r}: {exc}") from None
            entries.append(DatasetEntry(spec, **entry_kw))
        rates = raw.pop("loss_rates", None)
        if isinstance(rates, dict):
            ids = [e.spec.dataset_id for e in entries]
            unknown = set(rates) - set(ids)
            if unknown:
                raise ConfigurationError(f"loss rates for unknown datasets {sorted(unknown)}")
            rates = [float(rates.get(i, 1.0)) for i in ids]
        try:
            return cls(datasets=entries, model=model, optimizer=OptimizerConfig(**opt),
                       augmentation=AugmentationConfig(**aug), loss_rates=rates, **raw)
        except TypeError as exc:
            raise ConfigurationError(f"invalid config: {exc}") from None


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return RunConfig.from_dict(raw)


def apply_env_overrides(cfg: RunConfig) -> RunConfig:
    """``UNIPAR_SEED`` and ``UNIPAR_CHECKPOINT`` override the file values."""
    if "UNIPAR_SEED" in os.environ:
        cfg.seed = int(os.environ["UNIPAR_SEED"])
    if "UNIPAR_CHECKPOINT" in os.environ:
        cfg.checkpoint = os.environ["UNIPAR_CHECKPOINT"]
    return cfg


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
