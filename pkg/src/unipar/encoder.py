"""Phased fusion encoder.

The first L-1 pre-norm transformer layers see visual tokens only. The final
layer runs joint, unmasked self-attention over ``[visual ; attribute
queries]``; its attribute-position outputs feed the classification heads.
Query tokens get no positional embedding, so the fusion layer is exactly
equivariant to query permutations.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np

from unipar.errors import ConfigurationError, DataError, ShapeError
from unipar.numerics import (Rng, Tensor, add, broadcast_to, concat, gelu, get_default_dtype,
                             layer_norm, linear, matmul, parameter, reshape, scale, slice_axis, softmax, transpose)

LN_EPS = 1e-5


@dataclass
class EncoderLayer:
    ln1_gain: Tensor
    ln1_bias: Tensor
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    fc1_w: Tensor  # [d, 4d]
    fc1_b: Tensor
    fc2_w: Tensor  # [4d, d]
    fc2_b: Tensor
    heads: int

    @classmethod
    def create(cls, dim: int, heads: int, rng: Rng, mlp_ratio: int = 4) -> "EncoderLayer":
        if dim % heads:
            raise ConfigurationError(f"hidden dim {dim} is not divisible by {heads} heads")
        hidden = mlp_ratio * dim

        def w(shape):
            return parameter(rng.normal(shape, std=0.02))

        return cls(
            parameter(np.ones(dim)), parameter(np.zeros(dim)),
            w((dim, dim)), w((dim, dim)), w((dim, dim)), w((dim, dim)),
            parameter(np.ones(dim)), parameter(np.zeros(dim)),
            w((dim, hidden)), parameter(np.zeros(hidden)),
            w((hidden, dim)), parameter(np.zeros(dim)),
            heads,
        )

    @property
    def dim(self) -> int:
        return self.wq.shape[0]

    def parameters(self) -> dict[str, Tensor]:
        names = ("ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias",
                 "fc1_w", "fc1_b", "fc2_w", "fc2_b")
        return {k: getattr(self, k) for k in names}

    def attention(self, x: Tensor) -> Tensor:
        b, s, d = x.shape
        h = self.heads
        dh = d // h

        def split(t):  # [B, S, d] -> [B, h, S, dh]
            return transpose(reshape(t, (b, s, h, dh)), (0, 2, 1, 3))

        q = split(matmul(x, self.wq))
        k = split(matmul(x, self.wk))
        v = split(matmul(x, self.wv))
        scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
        ctx = matmul(softmax(scores), v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, s, d))
        return matmul(ctx, self.wo)

    def __call__(self, x: Tensor) -> Tensor:
        """``[B, S, d]`` (or ``[S, d]``) -> same shape."""
        single = x.ndim == 2
        if single:
            x = reshape(x, (1,) + x.shape)
        if x.shape[-1] != self.dim:
            raise ShapeError(f"encoder layer of width {self.dim} got tokens {x.shape}")
        x = add(x, self.attention(layer_norm(x, self.ln1_gain, self.ln1_bias, LN_EPS)))
        hdn = gelu(linear(layer_norm(x, self.ln2_gain, self.ln2_bias, LN_EPS), self.fc1_w, self.fc1_b))
        x = add(x, linear(hdn, self.fc2_w, self.fc2_b))
        return reshape(x, x.shape[1:]) if single else x


def encode_visual(tokens: Tensor, layers) -> Tensor:
    """Run the L-1 visual-only layers."""
    if len(layers) < 1:
        raise ConfigurationError("phased encoder needs L >= 2 (at least one visual layer before fusion)")
    for layer in layers:
        tokens = layer(tokens)
    return tokens


class QueryMode(str, Enum):
    LEARNABLE = "LEARNABLE"
    EXTERNAL_FILE = "EXTERNAL_FILE"
    NONE = "NONE"


@dataclass
class AttributeQuerySet:
    dataset_id: str
    queries: Tensor  # [C, d] or [C, d_ext] for external files
    mode: QueryMode
    projection: Tensor | None = None  # [d_ext, d]

    @property
    def count(self) -> int:
        return self.queries.shape[0]

    def tokens(self) -> Tensor:
        return self.queries if self.projection is None else matmul(self.queries, self.projection)

    def parameters(self) -> dict[str, Tensor]:
        # frozen external vectors stay in the table so checkpoints carry them
        out = {"queries": self.queries}
        if self.projection is not None:
            out["projection"] = self.projection
        return out


def read_embedding_file(path) -> np.ndarray:
    """Read ``u32 C, u32 d_ext`` then C*d_ext little-endian float32 values."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read attribute embedding file {path}: {exc}") from exc
    if len(raw) < 8:
        raise DataError(f"{path}: missing 8-byte header")
    rows, cols = struct.unpack("<II", raw[:8])
    expected = 8 + 4 * rows * cols
    if len(raw) != expected:
        raise DataError(f"{path}: header says {rows}x{cols} ({expected} bytes) but file has {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(rows, cols).astype(np.float64)


def write_embedding_file(path, matrix) -> None:
    m = np.ascontiguousarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise ShapeError(f"embedding matrix must be 2-D, got {m.shape}")
    Path(path).write_bytes(struct.pack("<II", *m.shape) + m.tobytes())


def build_attribute_queries(dataset_id: str, count: int, dim: int, mode, rng: Rng,
                            path=None) -> AttributeQuerySet:
    mode = QueryMode(mode)
    if count < 1:
        raise ConfigurationError(f"dataset {dataset_id!r} has no attributes; query set would be empty")
    if mode is QueryMode.LEARNABLE:
        return AttributeQuerySet(dataset_id, parameter(rng.normal((count, dim), std=0.02)), mode)
    if mode is QueryMode.NONE:
        # slots with no semantic prior at all: identical zero start, still trainable
        return AttributeQuerySet(dataset_id, parameter(np.zeros((count, dim))), mode)
    if path is None:
        raise ConfigurationError(f"dataset {dataset_id!r}: EXTERNAL_FILE queries need an embedding file")
    matrix = read_embedding_file(path)
    if matrix.shape[0] != count:
        raise DataError(f"{path}: {matrix.shape[0]} embedding rows but dataset {dataset_id!r} has {count} attributes")
    frozen = Tensor(matrix, requires_grad=False, dtype=get_default_dtype())
    projection = None
    if matrix.shape[1] != dim:
        d_ext = matrix.shape[1]
        projection = parameter(rng.normal((d_ext, dim), std=1.0 / math.sqrt(d_ext)))
    return AttributeQuerySet(dataset_id, frozen, mode, projection)


def fuse(f_vis: Tensor, queries: AttributeQuerySet, final_layer: EncoderLayer):
    """Final-layer fusion over ``[F_vis ; T_attr]``.

    Returns ``(visual_out [.., n, d], attribute_out [.., C, d])``.
    """
    attr = queries.tokens()
    if attr.shape[-1] != f_vis.shape[-1]:
        raise ShapeError(f"query width {attr.shape[-1]} does not match visual width {f_vis.shape[-1]}")
    single = f_vis.ndim == 2
    if single:
        f_vis = reshape(f_vis, (1,) + f_vis.shape)
    b, n, d = f_vis.shape
    c = attr.shape[0]
    attr = broadcast_to(reshape(attr, (1, c, d)), (b, c, d))
    fused = final_layer(concat([f_vis, attr], axis=1))
    vis_out = slice_axis(fused, 0, n, 1)
    attr_out = slice_axis(fused, n, n + c, 1)
    if single:
        vis_out = reshape(vis_out, (n, d))
        attr_out = reshape(attr_out, (c, d))
    return vis_out, attr_out
