"""Pre-norm Transformer decoder with masked self-attention and cross-attention
over the encoder memory."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core
from .core import Tensor, as_tensor
from .errors import ConfigError, ContractError, LengthError, VocabularyError
from .nn import Dropout, Embedding, LayerNorm, Linear, Module

BOS = 1


@dataclass(frozen=True)
class DecoderConfig:
    d: int = 512
    n_layers: int = 3
    heads: int = 8
    d_ff: int = 2048
    dropout: float = 0.1
    vocab_size: int = 1000
    max_len: int = 60

    def __post_init__(self):
        if self.d % self.heads:
            raise ConfigError(f"decoder width {self.d} not divisible by {self.heads} heads")
        if self.n_layers < 1:
            raise ConfigError("decoder needs at least one layer")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    """``pe[pos, 2i] = sin(pos / 10000^(2i/d))``, ``pe[pos, 2i+1] = cos(...)``."""
    pos = np.arange(length, dtype=np.float64)[:, None]
    freq = np.exp(-math.log(10000.0) * np.arange(0, d, 2, dtype=np.float64) / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq[: d // 2])
    return pe


def causal_mask(length: int) -> np.ndarray:
    return np.tril(np.ones((length, length), dtype=bool))


class MultiHeadAttention(Module):
    def __init__(self, d: int, heads: int, dropout: float, rng, dtype=np.float32):
        self.heads = heads
        self.q = Linear(d, d, rng, dtype=dtype)
        self.k = Linear(d, d, rng, dtype=dtype)
        self.v = Linear(d, d, rng, dtype=dtype)
        self.o = Linear(d, d, rng, dtype=dtype)
        self.drop = Dropout(dropout)
        self._last_weights: np.ndarray | None = None

    def _split(self, x: Tensor) -> Tensor:
        B, T, d = x.shape
        return x.reshape(B, T, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def forward(self, query: Tensor, source: Tensor, mask: np.ndarray | None = None) -> Tensor:
        """``query`` ``[B,T,d]`` attends over ``source`` ``[B,S,d]``; ``mask``
        broadcasts to ``[B,heads,T,S]`` with True marking visible keys."""
        B, T, d = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(source))
        v = self._split(self.v(source))
        scores = core.matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.heads))
        weights = core.softmax(scores, axis=-1, mask=mask)
        self._last_weights = weights.data
        ctx = core.matmul(self.drop(weights), v)
        return self.o(ctx.transpose(0, 2, 1, 3).reshape(B, T, d))


class FeedForward(Module):
    def __init__(self, d: int, d_ff: int, dropout: float, rng, dtype=np.float32):
        self.fc1 = Linear(d, d_ff, rng, dtype=dtype)
        self.fc2 = Linear(d_ff, d, rng, dtype=dtype)
        self.drop = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.drop(core.relu(self.fc1(x))))


class DecoderLayer(Module):
    def __init__(self, cfg: DecoderConfig, rng, dtype=np.float32):
        self.ln_self = LayerNorm(cfg.d, dtype=dtype)
        self.self_attn = MultiHeadAttention(cfg.d, cfg.heads, cfg.dropout, rng, dtype)
        self.ln_cross = LayerNorm(cfg.d, dtype=dtype)
        self.cross_attn = MultiHeadAttention(cfg.d, cfg.heads, cfg.dropout, rng, dtype)
        self.ln_ff = LayerNorm(cfg.d, dtype=dtype)
        self.ff = FeedForward(cfg.d, cfg.d_ff, cfg.dropout, rng, dtype)
        self.drop = Dropout(cfg.dropout)

    def forward(self, x: Tensor, memory: Tensor, self_mask, memory_mask) -> Tensor:
        h = self.ln_self(x)
        x = x + self.drop(self.self_attn(h, h, self_mask))
        x = x + self.drop(self.cross_attn(self.ln_cross(x), memory, memory_mask))
        return x + self.drop(self.ff(self.ln_ff(x)))


class TransformerDecoder(Module):
    def __init__(self, cfg: DecoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.embedding = Embedding(cfg.vocab_size, cfg.d, rng, dtype)
        self.embed_drop = Dropout(cfg.dropout)
        self.layers = [DecoderLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]
        self.ln_out = LayerNorm(cfg.d, dtype=dtype)
        self.out_proj = Linear(cfg.d, cfg.vocab_size, rng, dtype=dtype)
        self._pe = sinusoidal_positions(cfg.max_len, cfg.d).astype(dtype)

    def embed_tokens(self, ids) -> Tensor:
        """Scaled token embedding plus sinusoidal positions (dropout not applied)."""
        ids = np.asarray(ids, dtype=np.int64)
        T = ids.shape[-1]
        if T > self.cfg.max_len:
            raise LengthError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.cfg.vocab_size):
            raise VocabularyError(
                f"token id out of range [0, {self.cfg.vocab_size}): {ids.min()}..{ids.max()}"
            )
        scale = math.sqrt(self.cfg.d)
        return self.embedding(ids) * scale + self._pe[:T]

    def forward(self, y_emb: Tensor, memory: Tensor,
                memory_mask: np.ndarray | None = None) -> Tensor:
        """Hidden states ``[B,T,d]`` (or ``[T,d]`` for unbatched input).

        ``memory_mask`` is ``[B,S]`` with True on valid memory positions.
        """
        y_emb, memory = as_tensor(y_emb), as_tensor(memory)
        unbatched = y_emb.ndim == 2
        if unbatched:
            y_emb = y_emb.reshape(1, *y_emb.shape)
        if memory.ndim == 2:
            memory = memory.reshape(1, *memory.shape)
        T = y_emb.shape[1]
        self_mask = causal_mask(T)[None, None]
        mem_mask = None if memory_mask is None else np.asarray(memory_mask)[:, None, None, :]
        x = self.embed_drop(y_emb)
        for layer in self.layers:
            x = layer(x, memory, self_mask, mem_mask)
        x = self.ln_out(x)
        return x.reshape(*x.shape[1:]) if unbatched else x

    def logits(self, ids, memory: Tensor, memory_mask=None) -> Tensor:
        return self.out_proj(self.forward(self.embed_tokens(ids), memory, memory_mask))

    def decode_logits(self, memory: Tensor, prefix) -> Tensor:
        """Next-token logits ``[vocab]`` given a BOS-initial prefix."""
        prefix = list(prefix)
        if not prefix or prefix[0] != BOS:
            raise ContractError("prefix must begin with BOS")
        if len(prefix) > self.cfg.max_len:
            raise LengthError(f"prefix length {len(prefix)} exceeds max_len {self.cfg.max_len}")
        logits = self.logits(np.asarray(prefix), as_tensor(memory))
        return logits[-1]
