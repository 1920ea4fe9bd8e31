"""Visual feature acquisition: a toy patch extractor and the binary feature
file format.

Feature file layout (little-endian)::

    b"R2GF" | u8 version=1 | u32 S | u32 d | S*d float32, row-major
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import core
from .core import Tensor
from .errors import (
    BadMagicError,
    DimensionOverflowError,
    FeatureFormatError,
    GeometryError,
    TruncatedPayloadError,
)
from .io import atomic_write_bytes
from .nn import Linear

MAGIC = b"R2GF"
VERSION = 1
_HEADER = struct.Struct("<4sBII")
MAX_ELEMENTS = 1 << 28


@dataclass
class FeatureSequence:
    values: Tensor

    @property
    def s(self) -> int:
        return self.values.shape[0]

    @property
    def d(self) -> int:
        return self.values.shape[1]

    def __post_init__(self):
        if self.values.ndim != 2 or self.values.shape[0] < 1:
            raise GeometryError(f"feature sequence must be [S>=1, d], got {self.values.shape}")


def patch_means(image: np.ndarray, patch: int) -> np.ndarray:
    """Mean of each ``patch x patch`` cell, flattened row-major to ``[S, c]``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    h, w, c = image.shape
    if patch < 1 or h % patch or w % patch:
        raise GeometryError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    cells = image.reshape(h // patch, patch, w // patch, patch, c).mean(axis=(1, 3))
    return cells.reshape(-1, c)


def extract_features(image: np.ndarray, patch: int, proj: Linear) -> FeatureSequence:
    """Pool each patch and project it to the model width with ``proj``."""
    pooled = patch_means(image, patch).astype(proj.weight.dtype)
    return FeatureSequence(proj(Tensor(pooled)))


def concat_features(seqs: list[FeatureSequence]) -> FeatureSequence:
    """Join several images' sequences along the patch axis."""
    if len(seqs) == 1:
        return seqs[0]
    return FeatureSequence(core.concat([s.values for s in seqs], axis=0))


def encode_features(values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.ndim != 2:
        raise GeometryError(f"features must be 2-D, got shape {values.shape}")
    S, d = values.shape
    header = _HEADER.pack(MAGIC, VERSION, S, d)
    return header + np.ascontiguousarray(values, dtype="<f4").tobytes()


def decode_features(blob: bytes) -> np.ndarray:
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagicError("not a feature file (bad magic bytes)")
    if len(blob) < _HEADER.size:
        raise TruncatedPayloadError("feature header is truncated")
    _, version, S, d = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise FeatureFormatError(f"unsupported feature file version {version}")
    if S == 0 or d == 0 or S * d > MAX_ELEMENTS:
        raise DimensionOverflowError(f"implausible feature dimensions S={S}, d={d}")
    need = S * d * 4
    payload = blob[_HEADER.size:]
    if len(payload) < need:
        raise TruncatedPayloadError(f"payload has {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise FeatureFormatError(f"{len(payload) - need} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(S, d).astype(np.float32)


def save_features(path, values) -> None:
    atomic_write_bytes(path, encode_features(values))


def load_features(path) -> FeatureSequence:
    return FeatureSequence(Tensor(decode_features(Path(path).read_bytes())))
