"""Binary checkpoint: named float32 tables plus a JSON config echo.

Layout (all little-endian)::

    b"UPARCKPT"  u8 version
    u32 n  + n bytes   config JSON (sorted keys)
    u64 step counter   u32 engine cursor
    u32 entries, each: u16 n + name, u8 ndim, u32 dims[ndim], f32 data
    u32 moment steps, each: u16 n + name, u64 t

Entry names are prefixed ``param/``, ``buffer/``, ``adam.m/``, ``adam.v/``.
"""
from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from unipar.errors import CorruptionError, IncompatibleCheckpointError

MAGIC = b"UPARCKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config: dict
    tables: dict  # name -> float32 ndarray, insertion order preserved
    moment_steps: dict = field(default_factory=dict)
    step_counter: int = 0
    cursor: int = -1


def _name(buf: io.BytesIO, name: str) -> None:
    raw = name.encode()
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)


def encode(ckpt: Checkpoint) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", VERSION))
    cfg = json.dumps(ckpt.config, sort_keys=True, separators=(",", ":")).encode()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Qi", ckpt.step_counter, ckpt.cursor))
    buf.write(struct.pack("<I", len(ckpt.tables)))
    for name, arr in ckpt.tables.items():
        arr = np.asarray(arr)
        _name(buf, name)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    buf.write(struct.pack("<I", len(ckpt.moment_steps)))
    for name, t in ckpt.moment_steps.items():
        _name(buf, name)
        buf.write(struct.pack("<Q", t))
    return buf.getvalue()


def decode(raw: bytes) -> Checkpoint:
    view = memoryview(raw)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise CorruptionError("checkpoint truncated")
        out = view[pos:pos + n]
        pos += n
        return out

    def unpack(fmt):
        return struct.unpack(fmt, take(struct.calcsize(fmt)))

    def name():
        (n,) = unpack("<H")
        return bytes(take(n)).decode()

    if bytes(take(len(MAGIC))) != MAGIC:
        raise CorruptionError("not a unipar checkpoint")
    (version,) = unpack("<B")
    if version != VERSION:
        raise IncompatibleCheckpointError(f"checkpoint format version {version}, expected {VERSION}")
    (n,) = unpack("<I")
    config = json.loads(bytes(take(n)).decode())
    step, cursor = unpack("<Qi")
    (count,) = unpack("<I")
    tables = {}
    for _ in range(count):
        key = name()
        (ndim,) = unpack("<B")
        shape = unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        tables[key] = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(shape).copy()
    (count,) = unpack("<I")
    steps = {}
    for _ in range(count):
        key = name()
        (steps[key],) = unpack("<Q")
    if pos != len(view):
        raise CorruptionError(f"{len(view) - pos} trailing bytes after checkpoint payload")
    return Checkpoint(config, tables, steps, step, cursor)


def save(ckpt: Checkpoint, path) -> None:
    """Atomic write: the previous file survives any failure mid-write."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(ckpt))
    os.replace(tmp, path)


def load(path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------- model <-> checkpoint


def capture(model, optimizer=None, config: dict | None = None, step_counter: int = 0,
            cursor: int = -1) -> Checkpoint:
    tables = {}
    for k, p in model.named_parameters().items():
        tables[f"param/{k}"] = p.data
    for k, b in model.named_buffers().items():
        tables[f"buffer/{k}"] = b
    steps = {}
    if optimizer is not None:
        for k in sorted(optimizer.state):
            mom = optimizer.state[k]
            tables[f"adam.m/{k}"] = mom.m
            tables[f"adam.v/{k}"] = mom.v
            steps[k] = mom.t
    return Checkpoint(config or {}, tables, steps, step_counter, cursor)


def restore(ckpt: Checkpoint, model, optimizer=None) -> None:
    """Copy checkpoint arrays into ``model`` (and ``optimizer``) in place."""
    from unipar.numerics import Moments

    params = model.named_parameters()
    buffers = model.named_buffers()
    for k, p in params.items():
        arr = ckpt.tables.get(f"param/{k}")
        if arr is None:
            raise IncompatibleCheckpointError(f"checkpoint has no parameter {k!r}")
        if arr.shape != p.shape:
            raise IncompatibleCheckpointError(f"parameter {k!r}: checkpoint shape {arr.shape}, model shape {p.shape}")
        p.data[...] = arr
    for k, b in buffers.items():
        arr = ckpt.tables.get(f"buffer/{k}")
        if arr is None or arr.shape != b.shape:
            raise IncompatibleCheckpointError(f"buffer {k!r} missing or mis-shaped in checkpoint")
        b[...] = arr
    extra = [k for k in ckpt.tables if k.startswith("param/") and k[6:] not in params]
    if extra:
        raise IncompatibleCheckpointError(f"checkpoint parameters unknown to the model: {extra[:5]}")
    if optimizer is not None:
        optimizer.state.clear()
        for k, t in ckpt.moment_steps.items():
            p = params[k]
            optimizer.state[k] = Moments(ckpt.tables[f"adam.m/{k}"].astype(p.dtype),
                                         ckpt.tables[f"adam.v/{k}"].astype(p.dtype), int(t))
