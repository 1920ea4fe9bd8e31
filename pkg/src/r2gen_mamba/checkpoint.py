"""Binary checkpoint format.

Layout (little-endian)::

    b"R2GC" | u8 version
    u32 n | n bytes UTF-8 "key=value" lines (model + training config, meta.*)
    tensor table: parameters
    tensor table: optimizer state
    u64 RNG state

A tensor table is ``u32 count`` followed, per tensor, by
``u32 name_len | name (UTF-8) | u8 rank | u32 dims[rank] | float32 data``.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ModelConfig, TrainConfig, from_mapping, parse_lines, to_lines
from .errors import CheckpointError, CheckpointShapeError, CheckpointVersionError
from .io import atomic_write_bytes

MAGIC = b"R2GC"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    optim: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    rng_state: int = 0
    best_bleu4: float = -1.0
    best_epoch: int = -1

    def meta_lines(self) -> list[str]:
        return [
            f"meta.step={self.step}",
            f"meta.epoch={self.epoch}",
            f"meta.best_bleu4={self.best_bleu4!r}",
            f"meta.best_epoch={self.best_epoch}",
        ]

    def restore_params(self, model) -> None:
        """Copy parameters into ``model``; names and shapes must match."""
        live = dict(model.named_parameters())
        if set(live) != set(self.params):
            missing = sorted(set(live) ^ set(self.params))
            raise CheckpointShapeError(f"parameter names differ: {missing[:5]}")
        for name, tensor in live.items():
            stored = self.params[name]
            if stored.shape != tensor.shape:
                raise CheckpointShapeError(
                    f"{name}: checkpoint shape {stored.shape} vs model shape {tensor.shape}"
                )
        for name, tensor in live.items():
            tensor.data = self.params[name].astype(tensor.dtype, copy=True)


def _pack_table(tensors: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError("checkpoint is truncated")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def table(self) -> dict[str, np.ndarray]:
        (count,) = self.unpack("<I")
        tensors = {}
        for _ in range(count):
            (n,) = self.unpack("<I")
            name = self.take(n).decode("utf-8")
            (rank,) = self.unpack("<B")
            shape = self.unpack(f"<{rank}I")
            size = int(np.prod(shape, dtype=np.int64))
            data = np.frombuffer(self.take(4 * size), dtype="<f4")
            tensors[name] = data.astype(np.float32).reshape(shape)
        return tensors


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    lines = to_lines(ckpt.model_config, ckpt.train_config) + ckpt.meta_lines()
    text = "".join(line + "\n" for line in lines).encode("utf-8")
    return b"".join([
        MAGIC,
        struct.pack("<B", VERSION),
        struct.pack("<I", len(text)),
        text,
        _pack_table(ckpt.params),
        _pack_table(ckpt.optim),
        struct.pack("<Q", ckpt.rng_state & 0xFFFFFFFFFFFFFFFF),
    ])


def decode_checkpoint(blob: bytes) -> Checkpoint:
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic bytes)")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint version {version}, expected {VERSION}")
    (n,) = r.unpack("<I")
    values = parse_lines(r.take(n).decode("utf-8").splitlines())
    meta = {k[5:]: values.pop(k) for k in list(values) if k.startswith("meta.")}
    model_cfg, train_cfg = from_mapping(values)
    params = r.table()
    optim = r.table()
    (rng_state,) = r.unpack("<Q")
    if r.pos != len(blob):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(
        model_cfg, train_cfg, params, optim,
        step=int(meta.get("step", 0)),
        epoch=int(meta.get("epoch", 0)),
        rng_state=rng_state,
        best_bleu4=float(meta.get("best_bleu4", -1.0)),
        best_epoch=int(meta.get("best_epoch", -1)),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    atomic_write_bytes(path, encode_checkpoint(ckpt))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
