"""Multi-modal visual embedding: stems, positional tables and the time adapter.

Any input (RGB image, video stack, event-frame stack) becomes a token
sequence ``[n_patches, d]``:

    patch_embed -> + spatial (+ temporal if T > 1) (+ modality if auxiliary)
                -> time adapter (T > 1) -> F_vis0
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from unipar.errors import ConfigurationError, RoutingError, ShapeError
from unipar.numerics import (Rng, Tensor, add, gelu, linear, parameter, reshape,
                             slice_axis, transpose)


class ModalityKind(str, Enum):
    RGB = "RGB"
    VIDEO = "VIDEO"
    EVENT = "EVENT"


# modalities that carry a learned type embedding; RGB (image or video) is the reference
AUXILIARY = (ModalityKind.EVENT,)


def patch_grid(height: int, width: int, patch: int) -> tuple[int, int]:
    if height % patch or width % patch:
        raise ConfigurationError(
            f"image {height}x{width} is not divisible by patch size {patch} (H={height}, W={width}, P={patch})")
    return height // patch, width // patch


@dataclass
class ModalityStem:
    modality: ModalityKind
    weight: Tensor  # [(P*P*ch), d]
    bias: Tensor  # [d]
    patch_size: int
    channels: int

    @classmethod
    def create(cls, modality, patch_size: int, channels: int, dim: int, rng: Rng) -> "ModalityStem":
        fan_in = patch_size * patch_size * channels
        w = rng.normal((fan_in, dim), std=1.0 / math.sqrt(fan_in))
        return cls(ModalityKind(modality), parameter(w), parameter(np.zeros(dim)), patch_size, channels)

    def parameters(self) -> dict[str, Tensor]:
        return {"weight": self.weight, "bias": self.bias}


def patchify(frames: np.ndarray, patch: int) -> np.ndarray:
    """``[..., ch, H, W]`` -> ``[..., n_patches, ch*P*P]``, patches row-major."""
    *lead, ch, h, w = frames.shape
    gh, gw = patch_grid(h, w, patch)
    x = frames.reshape(*lead, ch, gh, patch, gw, patch)
    k = len(lead)
    # -> lead, gh, gw, ch, py, px
    x = x.transpose(*range(k), k + 1, k + 3, k, k + 2, k + 4)
    return x.reshape(*lead, gh * gw, ch * patch * patch)


def patch_embed(frames, stem: ModalityStem) -> Tensor:
    """Frames ``[T, ch, H, W]`` (or batched ``[B, T, ch, H, W]``) to tokens ``[..., T, n, d]``."""
    arr = frames.data if isinstance(frames, Tensor) else np.asarray(frames)
    if arr.ndim not in (4, 5):
        raise ShapeError(f"expected [T, ch, H, W] or [B, T, ch, H, W] frames, got {arr.shape}")
    if arr.shape[-3] != stem.channels:
        raise ShapeError(f"{stem.modality.value} stem expects {stem.channels} channels, got {arr.shape[-3]}")
    patches = Tensor(patchify(arr, stem.patch_size), dtype=stem.weight.dtype)
    return linear(patches, stem.weight, stem.bias)


@dataclass
class PositionalTables:
    spatial: Tensor  # [n_patches, d]
    temporal: Tensor  # [T_max, d]
    modality: dict = field(default_factory=dict)  # ModalityKind -> Tensor[d], auxiliary only

    @classmethod
    def create(cls, n_patches: int, max_frames: int, dim: int, rng: Rng,
               auxiliary=AUXILIARY) -> "PositionalTables":
        return cls(
            parameter(rng.normal((n_patches, dim), std=0.02)),
            parameter(rng.normal((max_frames, dim), std=0.02)),
            {ModalityKind(m): parameter(rng.normal((dim,), std=0.02)) for m in auxiliary},
        )

    @property
    def max_frames(self) -> int:
        return self.temporal.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        out = {"spatial": self.spatial, "temporal": self.temporal}
        for m, t in self.modality.items():
            out[f"modality.{m.value}"] = t
        return out


def add_positional(tokens: Tensor, tables: PositionalTables, modality) -> Tensor:
    """Add spatial, temporal (T > 1) and modality (auxiliary) embeddings to ``[..., T, n, d]``."""
    modality = ModalityKind(modality)
    *lead, t, n, d = tokens.shape
    if n != tables.spatial.shape[0]:
        raise ShapeError(f"token count {n} does not match spatial table rows {tables.spatial.shape[0]}")
    if t > tables.max_frames:
        raise ConfigurationError(f"{t} frames exceed the temporal table size {tables.max_frames}")
    ones = (1,) * len(lead)
    out = add(tokens, reshape(tables.spatial, ones + (1, n, d)))
    if t > 1:
        temporal = tables.temporal
        if t < tables.max_frames:
            temporal = slice_axis(temporal, 0, t, 0)
        out = add(out, reshape(temporal, ones + (t, 1, d)))
    if modality in tables.modality:
        out = add(out, reshape(tables.modality[modality], ones + (1, 1, d)))
    return out


@dataclass
class TimeAdapter:
    """Per-position MLP mapping the T stacked frame tokens to one token."""
    w1: Tensor  # [(T*d), h]
    b1: Tensor
    w2: Tensor  # [h, d]
    b2: Tensor
    frames: int

    @classmethod
    def create(cls, frames: int, dim: int, rng: Rng, hidden: int | None = None) -> "TimeAdapter":
        hidden = hidden or 2 * dim
        fan1 = frames * dim
        return cls(
            parameter(rng.normal((fan1, hidden), std=1.0 / math.sqrt(fan1))),
            parameter(np.zeros(hidden)),
            parameter(rng.normal((hidden, dim), std=1.0 / math.sqrt(hidden))),
            parameter(np.zeros(dim)),
            frames,
        )

    def parameters(self) -> dict[str, Tensor]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def apply_time_adapter(tokens: Tensor, adapter: TimeAdapter | None) -> Tensor:
    """``[..., T, n, d]`` -> ``[..., n, d]``; single-frame input bypasses the adapter."""
    *lead, t, n, d = tokens.shape
    if t == 1:
        return reshape(tokens, (*lead, n, d))
    if adapter is None or adapter.frames != t:
        expected = None if adapter is None else adapter.frames
        raise ConfigurationError(f"time adapter configured for {expected} frames, input has {t}")
    k = len(lead)
    x = transpose(tokens, (*range(k), k + 1, k, k + 2))  # [..., n, T, d]
    x = reshape(x, (*lead, n, t * d))
    return linear(gelu(linear(x, adapter.w1, adapter.b1)), adapter.w2, adapter.b2)


def embed(frames, modality, stems: dict, tables: PositionalTables, adapters: dict) -> Tensor:
    """Full embedding pipeline; ``adapters`` maps frame count -> TimeAdapter."""
    modality = ModalityKind(modality)
    stem = stems.get(modality)
    if stem is None:
        raise RoutingError(f"no stem registered for modality {modality.value}")
    tokens = add_positional(patch_embed(frames, stem), tables, modality)
    t = tokens.shape[-3]
    return apply_time_adapter(tokens, adapters.get(t) if t > 1 else None)
