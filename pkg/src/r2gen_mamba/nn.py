"""Minimal module system on top of :mod:`r2gen_mamba.core`."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import core
from .core import Tensor


class Module:
    """Base class: parameters and submodules are discovered from attributes
    in assignment order, which fixes the parameter naming and ordering."""

    training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def parameter(values: np.ndarray, dtype) -> Tensor:
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


class Linear(Module):
    """``y = x @ W + b`` with ``W`` stored as ``[in, out]``."""

    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        self.d_in, self.d_out = d_in, d_out
        bound = 1.0 / math.sqrt(d_in)
        self.weight = parameter(rng.uniform(-bound, bound, (d_in, d_out)), dtype)
        self.bias = parameter(rng.uniform(-bound, bound, d_out), dtype) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        y = core.matmul(x, self.weight)
        if self.bias is not None:
            y = y + self.bias
        return y


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5, dtype=np.float32):
        self.eps = eps
        self.gain = parameter(np.ones(d), dtype)
        self.bias = parameter(np.zeros(d), dtype)

    def forward(self, x: Tensor) -> Tensor:
        return core.layer_norm(x, self.gain, self.bias, self.eps)


class Embedding(Module):
    def __init__(self, num: int, d: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = parameter(rng.normal(0.0, d ** -0.5, (num, d)), dtype)

    def forward(self, ids) -> Tensor:
        return core.gather_rows(self.weight, ids)


class Dropout(Module):
    def __init__(self, p: float):
        self.p = p
        self.rng: np.random.Generator | None = None

    def forward(self, x: Tensor) -> Tensor:
        return core.dropout(x, self.p, self.rng, self.training)


def set_dropout_rng(model: Module, rng: np.random.Generator | None) -> None:
    for m in model.modules():
        if isinstance(m, Dropout):
            m.rng = rng
