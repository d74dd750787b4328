"""Dataset registry, synthetic heterogeneous datasets, on-disk format, augmentation.

On-disk layout per dataset (``<dir>/<dataset_id>.manifest`` + ``.bin``)::

    # unipar-manifest v1
    dataset_id: toy_rgb
    ...header keys...
    samples:
    <uid> <TRAIN|VAL> <label bits> <offset> <length> <crc32>

The blob is the concatenation of every sample's frames as little-endian
float32 ``[T, ch, H, W]`` arrays with no padding between records.
"""
from __future__ import annotations

import hashlib
import zlib
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from unipar.embeddings import ModalityKind, patch_grid
from unipar.errors import ConfigurationError, CorruptionError, DataError
from unipar.numerics import Rng

MANIFEST_MAGIC = "# unipar-manifest v1"
NOISE_STD = 0.5
SIGNAL = 2.0


class Split(str, Enum):
    TRAIN = "TRAIN"
    VAL = "VAL"


@dataclass
class DatasetSpec:
    dataset_id: str
    name: str
    modality: ModalityKind
    attribute_names: list
    frames: int
    height: int
    width: int
    channels: int
    train_size: int
    val_size: int
    target_rates: list
    positive_rates: list = field(default_factory=list)

    def __post_init__(self):
        self.modality = ModalityKind(self.modality)
        self.attribute_names = list(self.attribute_names)
        self.target_rates = [float(r) for r in self.target_rates]
        self.positive_rates = [float(r) for r in self.positive_rates]

    @property
    def count(self) -> int:
        return len(self.attribute_names)

    def validate(self, patch_size: int | None = None) -> None:
        if not self.attribute_names:
            raise ConfigurationError(f"{self.dataset_id}: no attributes")
        if len(self.target_rates) != self.count:
            raise ConfigurationError(f"{self.dataset_id}: {len(self.target_rates)} target rates for {self.count} attributes")
        if any(not 0 <= r <= 1 for r in self.target_rates + self.positive_rates):
            raise DataError(f"{self.dataset_id}: rates must lie in [0, 1]")
        if self.positive_rates and len(self.positive_rates) != self.count:
            raise DataError(f"{self.dataset_id}: {len(self.positive_rates)} positive rates for {self.count} attributes")
        if self.modality is ModalityKind.RGB and self.frames != 1:
            raise ConfigurationError(f"{self.dataset_id}: RGB datasets carry exactly one frame, got {self.frames}")
        if self.frames < 1:
            raise ConfigurationError(f"{self.dataset_id}: frame count must be >= 1")
        if patch_size is not None:
            gh, gw = patch_grid(self.height, self.width, patch_size)
            if self.count > gh * gw:
                raise ConfigurationError(
                    f"{self.dataset_id}: {self.count} attributes exceed the {gh}x{gw} patch grid capacity {gh * gw}")

    @property
    def sample_bytes(self) -> int:
        return self.frames * self.channels * self.height * self.width * 4


@dataclass(frozen=True)
class SampleRecord:
    uid: int
    split: Split
    labels: tuple
    offset: int
    length: int
    crc32: int


@dataclass(frozen=True)
class RawSample:
    """A sample as delivered by a dataset reader, before collation."""
    dataset_id: str
    frames: np.ndarray  # [T, ch, H, W] (or a list of [ch, H, W] frames)
    labels: np.ndarray
    origin_uid: int = -1


class Dataset:
    """Hydrated manifest plus lazy blob access."""

    def __init__(self, spec: DatasetSpec, records: list, blob_path: Path, blob_sha256: str,
                 patch_size: int):
        self.spec = spec
        self.records = records
        self.blob_path = Path(blob_path)
        self.blob_sha256 = blob_sha256
        self.patch_size = patch_size
        self._blob = None

    def split(self, split) -> list:
        split = Split(split)
        return [r for r in self.records if r.split is split]

    def labels(self, split) -> np.ndarray:
        rows = [r.labels for r in self.split(split)]
        return np.array(rows, dtype=np.int8).reshape(len(rows), self.spec.count)

    def _mapped(self):
        if self._blob is None:
            self._blob = np.memmap(self.blob_path, dtype="<f4", mode="r")
        return self._blob

    def frames(self, record: SampleRecord) -> np.ndarray:
        s = self.spec
        start = record.offset // 4
        flat = self._mapped()[start:start + record.length // 4]
        return np.array(flat, dtype=np.float32).reshape(s.frames, s.channels, s.height, s.width)

    def raw(self, record: SampleRecord) -> RawSample:
        return RawSample(self.spec.dataset_id, self.frames(record),
                         np.array(record.labels, dtype=np.int8), record.uid)


# ---------------------------------------------------------------- generation


def _dataset_tag(dataset_id: str) -> int:
    return zlib.crc32(dataset_id.encode())


def cell_origin(index: int, width: int, patch: int) -> tuple[int, int]:
    gw = width // patch
    return (index // gw) * patch, (index % gw) * patch


def attribute_texture(index: int, channels: int, size: int) -> np.ndarray:
    """Fixed +-0.5 pattern for attribute ``index``; independent of the run seed."""
    bits = Rng(0x7E47 + index).uniform((channels, size, size)) < 0.5
    return np.where(bits, 0.5, -0.5)


def render_sample(spec: DatasetSpec, labels, patch: int, rng: Rng) -> np.ndarray:
    """Noise plus a planted pattern in grid cell j for every present attribute j."""
    t, ch, h, w = spec.frames, spec.channels, spec.height, spec.width
    if spec.modality is ModalityKind.EVENT:
        x = rng.normal((t, ch, h, w), std=0.3)
        speckle = rng.uniform((t, 1, h, w))
        x += np.where(speckle < 0.01, 1.0, 0.0) - np.where(speckle > 0.99, 1.0, 0.0)
    else:
        x = rng.normal((t, ch, h, w), std=NOISE_STD)
    half = patch // 2
    lo = patch // 4
    for j in np.flatnonzero(labels):
        r0, c0 = cell_origin(int(j), w, patch)
        if spec.modality is ModalityKind.EVENT:
            # fixed per-(attribute, frame) polarity pattern, mostly positive
            for f in range(t):
                pat = Rng(int(j) * 1000 + f).uniform((patch, patch))
                polarity = np.where(pat < 0.3, SIGNAL, 0.0) - np.where(pat > 0.9, SIGNAL, 0.0)
                x[f, :, r0:r0 + patch, c0:c0 + patch] += polarity
            continue
        # a block with a fixed per-attribute texture, so attributes differ in
        # content as well as in position
        block = SIGNAL * (0.5 + attribute_texture(int(j), ch, half))
        for f in range(t):
            drift = 0 if spec.modality is ModalityKind.RGB else min(max(f - t // 2, -lo), lo)
            cc = c0 + lo + drift
            x[f, :, r0 + lo:r0 + lo + half, cc:cc + half] += block
    return x.astype(np.float32)


def generate_synthetic(spec: DatasetSpec, seed: int, directory, patch_size: int = 16) -> Dataset:
    """Write ``spec``'s dataset under ``directory``; deterministic in ``(spec, seed)``."""
    spec.validate(patch_size)
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    root = Rng(seed).fork(("dataset", spec.dataset_id))
    total = spec.train_size + spec.val_size
    labels = root.fork("labels").bernoulli(np.array(spec.target_rates), (total, spec.count))
    tag = _dataset_tag(spec.dataset_id)
    blob_path = directory / f"{spec.dataset_id}.bin"
    records = []
    sha = hashlib.sha256()
    offset = 0
    with open(blob_path, "wb") as fh:
        for i in range(total):
            payload = render_sample(spec, labels[i], patch_size, root.fork(("sample", i))).astype("<f4").tobytes()
            fh.write(payload)
            sha.update(payload)
            split = Split.TRAIN if i < spec.train_size else Split.VAL
            records.append(SampleRecord((tag << 32) | i, split, tuple(int(v) for v in labels[i]),
                                        offset, len(payload), zlib.crc32(payload)))
            offset += len(payload)
    spec.positive_rates = _rates_from_records(records, spec.count)
    dataset = Dataset(spec, records, blob_path, sha.hexdigest(), patch_size)
    write_manifest(dataset, directory / f"{spec.dataset_id}.manifest")
    return dataset


def _rates_from_records(records, count: int) -> list:
    train = [r.labels for r in records if r.split is Split.TRAIN]
    if not train:
        raise DataError("TRAIN split is empty; positive rates are undefined")
    arr = np.array(train, dtype=np.int64).reshape(len(train), count)
    return [float(v) for v in arr.sum(0) / len(train)]


def positive_rates(dataset: Dataset) -> np.ndarray:
    return np.array(_rates_from_records(dataset.records, dataset.spec.count))


# ---------------------------------------------------------------- manifest


def _fmt_list(values) -> str:
    return ",".join(repr(float(v)) for v in values)


def write_manifest(dataset: Dataset, path) -> None:
    s = dataset.spec
    header = [
        MANIFEST_MAGIC,
        f"dataset_id: {s.dataset_id}",
        f"name: {s.name}",
        f"modality: {s.modality.value}",
        f"height: {s.height}",
        f"width: {s.width}",
        f"channels: {s.channels}",
        f"frames: {s.frames}",
        f"patch_size: {dataset.patch_size}",
        f"attribute_count: {s.count}",
        f"attributes: {','.join(s.attribute_names)}",
        f"train_size: {s.train_size}",
        f"val_size: {s.val_size}",
        f"target_rates: {_fmt_list(s.target_rates)}",
        f"positive_rates: {_fmt_list(s.positive_rates)}",
        f"blob: {dataset.blob_path.name}",
        f"blob_sha256: {dataset.blob_sha256}",
        "samples:",
    ]
    lines = [f"{r.uid} {r.split.value} {''.join(map(str, r.labels))} {r.offset} {r.length} {r.crc32:08x}"
             for r in dataset.records]
    Path(path).write_text("\n".join(header + lines) + "\n")


def load_manifest(path, verify_checksums: bool = True) -> Dataset:
    path = Path(path)
    text = path.read_text().splitlines()
    if not text or text[0] != MANIFEST_MAGIC:
        raise DataError(f"{path}: not a unipar manifest")
    meta = {}
    i = 1
    while i < len(text) and text[i] != "samples:":
        key, sep, value = text[i].partition(":")
        if not sep:
            raise DataError(f"{path}:{i + 1}: malformed header line {text[i]!r}")
        meta[key.strip()] = value.strip()
        i += 1
    try:
        spec = DatasetSpec(
            dataset_id=meta["dataset_id"], name=meta["name"], modality=meta["modality"],
            attribute_names=meta["attributes"].split(","), frames=int(meta["frames"]),
            height=int(meta["height"]), width=int(meta["width"]), channels=int(meta["channels"]),
            train_size=int(meta["train_size"]), val_size=int(meta["val_size"]),
            target_rates=[float(v) for v in meta["target_rates"].split(",")],
            positive_rates=[float(v) for v in meta["positive_rates"].split(",")],
        )
        patch_size = int(meta["patch_size"])
        declared = int(meta["attribute_count"])
    except KeyError as exc:
        raise DataError(f"{path}: missing header key {exc}") from None
    if declared != spec.count:
        raise DataError(f"{path}: attribute_count {declared} but {spec.count} attribute names")
    blob_path = path.parent / meta["blob"]
    if not blob_path.exists():
        raise CorruptionError(f"{path}: blob {blob_path} is missing")
    blob_size = blob_path.stat().st_size
    records = []
    for line in text[i + 1:]:
        if not line.strip():
            continue
        uid, split, bits, offset, length, crc = line.split()
        if len(bits) != spec.count:
            raise DataError(f"{path}: sample {uid} has {len(bits)} labels, manifest declares {spec.count}")
        rec = SampleRecord(int(uid), Split(split), tuple(int(b) for b in bits), int(offset), int(length),
                           int(crc, 16))
        if rec.length != spec.sample_bytes:
            raise CorruptionError(f"{path}: sample {rec.uid} has payload length {rec.length}, expected {spec.sample_bytes}")
        if rec.offset + rec.length > blob_size:
            raise CorruptionError(f"{path}: sample {rec.uid} extends past the end of the blob ({blob_size} bytes)")
        records.append(rec)
    if len(records) != spec.train_size + spec.val_size:
        raise DataError(f"{path}: {len(records)} samples listed, splits declare {spec.train_size + spec.val_size}")
    if verify_checksums:
        with open(blob_path, "rb") as fh:
            for rec in records:
                fh.seek(rec.offset)
                if zlib.crc32(fh.read(rec.length)) != rec.crc32:
                    raise CorruptionError(f"{path}: checksum mismatch for sample {rec.uid}")
    dataset = Dataset(spec, records, blob_path, meta["blob_sha256"], patch_size)
    recount = _rates_from_records(records, spec.count)
    if recount != spec.positive_rates:
        raise DataError(f"{path}: manifest positive rates {spec.positive_rates} differ from label recount {recount}")
    return dataset


# ---------------------------------------------------------------- augmentation


@dataclass
class AugmentationConfig:
    flip_prob: float = 0.5
    pad: int = 0
    crop: tuple | None = None  # (H, W); None crops back to the input size
    erase_prob: float = 0.0
    erase_area: tuple = (0.02, 0.2)
    erase_aspect: tuple = (0.3, 3.3)

    @property
    def is_identity(self) -> bool:
        return self.flip_prob == 0 and self.pad == 0 and self.crop is None and self.erase_prob == 0


def augment(frames: np.ndarray, cfg: AugmentationConfig, rng: Rng) -> np.ndarray:
    """flip -> replicate pad -> random crop -> random erase, one draw shared by all frames."""
    t, ch, h, w = frames.shape
    out = frames
    if cfg.flip_prob > 0 and rng.random() < cfg.flip_prob:
        out = out[..., ::-1]
    if cfg.pad:
        out = np.pad(out, ((0, 0), (0, 0), (cfg.pad, cfg.pad), (cfg.pad, cfg.pad)), mode="edge")
    ch_, cw = cfg.crop if cfg.crop is not None else (h, w)
    ph, pw = out.shape[-2:]
    if ch_ > ph or cw > pw:
        raise ConfigurationError(f"crop {ch_}x{cw} larger than padded frame {ph}x{pw}")
    if (ch_, cw) != (ph, pw):
        top = rng.integer(0, ph - ch_ + 1)
        left = rng.integer(0, pw - cw + 1)
        out = out[..., top:top + ch_, left:left + cw]
    out = np.array(out, dtype=frames.dtype)
    if cfg.erase_prob > 0 and rng.random() < cfg.erase_prob:
        area = out.shape[-2] * out.shape[-1]
        target = area * (cfg.erase_area[0] + rng.random() * (cfg.erase_area[1] - cfg.erase_area[0]))
        log_lo, log_hi = np.log(cfg.erase_aspect)
        aspect = float(np.exp(log_lo + rng.random() * (log_hi - log_lo)))
        eh = int(round(np.sqrt(target * aspect)))
        ew = int(round(np.sqrt(target / aspect)))
        if 0 < eh <= out.shape[-2] and 0 < ew <= out.shape[-1]:
            top = rng.integer(0, out.shape[-2] - eh + 1)
            left = rng.integer(0, out.shape[-1] - ew + 1)
            region = out[..., top:top + eh, left:left + ew]
            region[...] = region.mean(axis=(-2, -1), keepdims=True)
    return out


# ---------------------------------------------------------------- defaults


def toy_specs(train_size: int = 200, val_size: int = 50, height: int = 64, width: int = 32) -> list:
    """RGB single-frame (C=8), VIDEO 5-frame (C=6), EVENT 5-frame (C=7)."""
    return [
        DatasetSpec("toy_rgb", "toy RGB stills", ModalityKind.RGB,
                    [f"rgb_attr{j}" for j in range(8)], 1, height, width, 3, train_size, val_size,
                    [0.5, 0.3, 0.6, 0.2, 0.4, 0.5, 0.35, 0.25]),
        DatasetSpec("toy_video", "toy video tracklets", ModalityKind.VIDEO,
                    [f"video_attr{j}" for j in range(6)], 5, height, width, 3, train_size, val_size,
                    [0.4, 0.5, 0.3, 0.6, 0.25, 0.45]),
        DatasetSpec("toy_event", "toy event-frame stacks", ModalityKind.EVENT,
                    [f"event_attr{j}" for j in range(7)], 5, height, width, 3, train_size, val_size,
                    [0.5, 0.35, 0.4, 0.3, 0.55, 0.2, 0.45]),
    ]
