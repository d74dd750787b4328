"""Assembly of all learnable state: stems, positional tables, time adapters,
encoder layers, per-dataset attribute queries and per-dataset heads."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from unipar.data import DatasetSpec
from unipar.embeddings import ModalityStem, PositionalTables, TimeAdapter, embed, patch_grid
from unipar.encoder import AttributeQuerySet, EncoderLayer, QueryMode, build_attribute_queries, encode_visual, fuse
from unipar.errors import ConfigurationError, RoutingError
from unipar.head import DatasetHead, HeadRegistry, predict, route
from unipar.numerics import Rng, Tensor, precision


@dataclass
class ModelConfig:
    dim: int = 32
    depth: int = 3
    heads: int = 2
    patch_size: int = 16
    mlp_ratio: int = 4
    height: int = 64
    width: int = 32
    channels: int = 3
    max_frames: int = 5
    dtype: str = "float32"

    def validate(self) -> None:
        if self.depth < 2:
            raise ConfigurationError(f"depth L={self.depth}: phased fusion needs L >= 2")
        if self.dim % self.heads:
            raise ConfigurationError(f"dim {self.dim} not divisible by {self.heads} heads")
        patch_grid(self.height, self.width, self.patch_size)

    @property
    def n_patches(self) -> int:
        gh, gw = patch_grid(self.height, self.width, self.patch_size)
        return gh * gw


class ModelState:
    def __init__(self, cfg: ModelConfig, specs: list, seed: int = 605,
                 query_modes: dict | None = None, query_files: dict | None = None):
        cfg.validate()
        self.cfg = cfg
        self.specs: dict[str, DatasetSpec] = {}
        query_modes = query_modes or {}
        query_files = query_files or {}
        rng = Rng(seed).fork("model")
        with precision(cfg.dtype):
            self.stems: dict = {}
            self.adapters: dict = {}
            for spec in specs:
                if (spec.height, spec.width, spec.channels) != (cfg.height, cfg.width, cfg.channels):
                    raise ConfigurationError(
                        f"{spec.dataset_id}: {spec.channels}x{spec.height}x{spec.width} input does not match the "
                        f"model's {cfg.channels}x{cfg.height}x{cfg.width}")
                if spec.frames > cfg.max_frames:
                    raise ConfigurationError(f"{spec.dataset_id}: {spec.frames} frames > max_frames {cfg.max_frames}")
                self.specs[spec.dataset_id] = spec
                if spec.modality not in self.stems:
                    self.stems[spec.modality] = ModalityStem.create(
                        spec.modality, cfg.patch_size, cfg.channels, cfg.dim, rng.fork(("stem", spec.modality.value)))
                if spec.frames > 1 and spec.frames not in self.adapters:
                    self.adapters[spec.frames] = TimeAdapter.create(
                        spec.frames, cfg.dim, rng.fork(("time_adapter", spec.frames)))
            self.tables = PositionalTables.create(cfg.n_patches, cfg.max_frames, cfg.dim, rng.fork("positional"))
            self.visual_layers = [EncoderLayer.create(cfg.dim, cfg.heads, rng.fork(("layer", i)), cfg.mlp_ratio)
                                  for i in range(cfg.depth - 1)]
            self.fusion_layer = EncoderLayer.create(cfg.dim, cfg.heads, rng.fork(("layer", cfg.depth - 1)),
                                                    cfg.mlp_ratio)
            self.queries: dict[str, AttributeQuerySet] = {}
            self.heads = HeadRegistry()
            for spec in specs:
                mode = QueryMode(query_modes.get(spec.dataset_id, QueryMode.LEARNABLE))
                self.queries[spec.dataset_id] = build_attribute_queries(
                    spec.dataset_id, spec.count, cfg.dim, mode, rng.fork(("queries", spec.dataset_id)),
                    query_files.get(spec.dataset_id))
                self.heads.register(DatasetHead.create(spec.dataset_id, spec.count, cfg.dim,
                                                       rng.fork(("head", spec.dataset_id))))
        self.query_modes = {k: q.mode.value for k, q in self.queries.items()}

    # ------------------------------------------------------------ parameters

    def named_parameters(self, trainable_only: bool = False) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def put(prefix, params):
            for k, v in params.items():
                out[f"{prefix}.{k}"] = v

        for m, stem in self.stems.items():
            put(f"stem.{m.value}", stem.parameters())
        put("pos", self.tables.parameters())
        for t, ad in self.adapters.items():
            put(f"time_adapter.T{t}", ad.parameters())
        for i, layer in enumerate(self.visual_layers):
            put(f"encoder.{i}", layer.parameters())
        put(f"encoder.{len(self.visual_layers)}", self.fusion_layer.parameters())
        for k, q in self.queries.items():
            put(f"queries.{k}", q.parameters())
        for head in self.heads:
            put(f"head.{head.dataset_id}", head.parameters())
        if trainable_only:
            out = {k: v for k, v in out.items() if v.requires_grad}
        return out

    def named_buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for head in self.heads:
            for k, v in head.buffers().items():
                out[f"head.{head.dataset_id}.{k}"] = v
        return out

    def dataset_parameters(self, dataset_id: str) -> dict[str, Tensor]:
        """Parameters owned exclusively by one dataset (its queries and head)."""
        prefixes = (f"queries.{dataset_id}.", f"head.{dataset_id}.")
        return {k: v for k, v in self.named_parameters().items() if k.startswith(prefixes)}

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.grad = None

    # ------------------------------------------------------------ forward

    def embed(self, frames, dataset_id: str) -> Tensor:
        spec = self._spec(dataset_id)
        return embed(frames, spec.modality, self.stems, self.tables, self.adapters)

    def encode(self, frames, dataset_id: str) -> Tensor:
        return encode_visual(self.embed(frames, dataset_id), self.visual_layers)

    def attribute_features(self, frames, dataset_id: str) -> Tensor:
        f_vis = self.encode(frames, dataset_id)
        _, attr = fuse(f_vis, self.queries[dataset_id], self.fusion_layer)
        return attr

    def forward(self, frames, dataset_id: str, train: bool) -> Tensor:
        """Frames ``[B, T, ch, H, W]`` of one dataset -> probabilities ``[B, C]``."""
        attr = self.attribute_features(frames, dataset_id)
        head = route(self.heads, self.queries[dataset_id].count, dataset_id)
        return predict(head, attr, train)

    def _spec(self, dataset_id) -> DatasetSpec:
        try:
            return self.specs[dataset_id]
        except KeyError:
            raise RoutingError(f"unknown dataset {dataset_id!r}; known: {list(self.specs)}") from None
