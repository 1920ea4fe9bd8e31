"""Run configuration and its flat ``key=value`` file format.

Blank lines and ``#`` comments are ignored. Every key is optional; unknown
keys and unparsable values are rejected. Keys::

    model:    d d_state d_conv expand enc_layers dec_layers heads d_ff
              dropout vocab_size max_len feat_dim
    training: lr_visual lr_other decay epochs batch_size seed beam_size
              length_norm min_freq patch
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .decoder import DecoderConfig
from .errors import ConfigError, ConfigNotFoundError
from .ssm import EncoderConfig


@dataclass(frozen=True)
class ModelConfig:
    d: int = 512
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    enc_layers: int = 1
    dec_layers: int = 3
    heads: int = 8
    d_ff: int = 2048
    dropout: float = 0.1
    vocab_size: int = 1000
    max_len: int = 60
    feat_dim: int = 2048

    def encoder(self) -> EncoderConfig:
        return EncoderConfig(self.d, self.d_state, self.d_conv, self.expand, self.enc_layers)

    def decoder(self) -> DecoderConfig:
        return DecoderConfig(self.d, self.dec_layers, self.heads, self.d_ff,
                             self.dropout, self.vocab_size, self.max_len)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    lr_visual: float = 5e-5
    lr_other: float = 1e-4
    decay: float = 0.8
    epochs: int = 50
    batch_size: int = 8
    seed: int = 0
    beam_size: int = 3
    length_norm: float = 0.0
    min_freq: int = 3
    patch: int = 16

    def __post_init__(self):
        if self.lr_visual <= 0 or self.lr_other <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("decay must lie in (0, 1]")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def _convert(kind, key: str, raw: str):
    try:
        if kind in (int, "int"):
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def to_lines(model: ModelConfig, train: TrainConfig | None = None) -> list[str]:
    items = [(f.name, getattr(model, f.name)) for f in fields(model)]
    if train is not None:
        items += [(f.name, getattr(train, f.name)) for f in fields(train)]
    return [f"{k}={v!r}" for k, v in items]


def from_mapping(values: dict[str, str]) -> tuple[ModelConfig, TrainConfig]:
    model_kw, train_kw = {}, {}
    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    for key, raw in values.items():
        if key in model_fields:
            model_kw[key] = _convert(model_fields[key], key, raw)
        elif key in train_fields:
            train_kw[key] = _convert(train_fields[key], key, raw)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    model = ModelConfig(**model_kw)
    # validate the derived component configs eagerly
    model.encoder(), model.decoder()
    return model, TrainConfig(**train_kw)


def parse_lines(lines) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        values[key] = raw
    return values


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    path = Path(path)
    if not path.is_file():
        raise ConfigNotFoundError(f"config file not found: {path}")
    return from_mapping(parse_lines(path.read_text(encoding="utf-8").splitlines()))
