"""End-to-end report generator: feature projection -> Mamba encoder ->
Transformer decoder, the teacher-forced likelihood loss and generation."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import core
from .beam import Hypothesis, beam_search, greedy_decode
from .config import ModelConfig
from .core import Tensor
from .decoder import TransformerDecoder
from .errors import ContractError, DimensionError
from .features import FeatureSequence, concat_features, patch_means
from .nn import Linear, Module
from .ssm import MambaEncoder
from .text import BOS, EOS, PAD, Vocabulary, decode_ids, detokenize

VISUAL_PREFIX = "visual."


def nll_loss(logits, targets, pad_mask=None, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of ``targets`` under ``softmax(logits)``.

    ``pad_mask`` is True where a position counts. ``reduction="mean"``
    averages over counted positions, ``"sum"`` returns the total.
    """
    logits = core.as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise DimensionError(f"logits {logits.shape} vs targets {targets.shape}")
    mask = np.ones(targets.shape, dtype=bool) if pad_mask is None else np.asarray(pad_mask, bool)
    n = int(mask.sum())
    if n == 0:
        raise ContractError("every target position is masked")
    picked = core.pick(core.log_softmax(logits, axis=-1), targets)
    total = -(picked * mask.astype(logits.dtype)).sum()
    if reduction == "sum":
        return total
    return total * (1.0 / n)


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD) -> np.ndarray:
    width = max(len(s) for s in seqs)
    out = np.full((len(seqs), width), pad, dtype=np.int64)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out


class R2GenMamba(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.visual = Linear(cfg.feat_dim, cfg.d, rng, dtype=dtype)
        self.encoder = MambaEncoder(cfg.encoder(), rng, dtype)
        self.decoder = TransformerDecoder(cfg.decoder(), rng, dtype)
        self._dtype = np.dtype(dtype)

    @property
    def dtype(self):
        return self._dtype

    def param_groups(self) -> dict[str, list[str]]:
        names = [n for n, _ in self.named_parameters()]
        visual = [n for n in names if n.startswith(VISUAL_PREFIX)]
        other = [n for n in names if not n.startswith(VISUAL_PREFIX)]
        return {"visual": visual, "other": other}

    # -- features -----------------------------------------------------------

    def features(self, raw) -> FeatureSequence:
        """Project raw patch features ``[S, feat_dim]`` (or a list of them,
        one per image) to the model width."""
        if isinstance(raw, (list, tuple)):
            return concat_features([self.features(r) for r in raw])
        raw = np.asarray(raw, dtype=self._dtype)
        if raw.ndim != 2 or raw.shape[1] != self.cfg.feat_dim:
            raise DimensionError(
                f"raw features {raw.shape} do not have width feat_dim={self.cfg.feat_dim}"
            )
        return FeatureSequence(self.visual(Tensor(raw)))

    def image_features(self, image: np.ndarray, patch: int) -> FeatureSequence:
        return self.features(patch_means(image, patch))

    def encode(self, raw) -> Tensor:
        return self.encoder(self.features(raw).values)

    # -- training -----------------------------------------------------------

    def batch_logits(self, raws: Sequence, inputs: np.ndarray) -> Tensor:
        memories = [self.encode(r) for r in raws]
        s_max = max(m.shape[0] for m in memories)
        memory = core.stack([core.pad_rows(m, s_max) for m in memories])
        mem_mask = np.zeros((len(memories), s_max), dtype=bool)
        for i, m in enumerate(memories):
            mem_mask[i, : m.shape[0]] = True
        return self.decoder.logits(inputs, memory, None if mem_mask.all() else mem_mask)

    def loss(self, raws: Sequence, reports: Sequence[Sequence[int]],
             reduction: str = "mean") -> Tensor:
        """Teacher-forced loss: inputs ``y[:-1]`` predict targets ``y[1:]``."""
        ids = pad_batch(reports)
        inputs, targets = ids[:, :-1], ids[:, 1:]
        logits = self.batch_logits(raws, inputs)
        return nll_loss(logits, targets, targets != PAD, reduction)

    # -- inference ----------------------------------------------------------

    def step_fn(self, memory: Tensor):
        """Next-token log-probabilities; PAD and BOS are never proposed."""

        def step(prefix):
            with core.no_grad():
                logits = self.decoder.decode_logits(memory, prefix).data.astype(np.float64)
            out = core.log_softmax(Tensor(logits)).data
            out[[PAD, BOS]] = -np.inf
            return out

        return step

    def generate_ids(self, raw, beam_size: int = 3, max_len: int | None = None,
                     length_norm: float = 0.0) -> Hypothesis:
        max_len = self.cfg.max_len if max_len is None else min(max_len, self.cfg.max_len)
        was_training = self.training
        self.eval()
        try:
            with core.no_grad():
                memory = self.encode(raw)
            step = self.step_fn(memory)
            if beam_size == 1:
                return greedy_decode(step, max_len)
            return beam_search(step, beam_size, max_len, length_norm)
        finally:
            self.train(was_training)

    def generate(self, raw, vocab: Vocabulary, beam_size: int = 3,
                 max_len: int | None = None, length_norm: float = 0.0) -> str:
        hyp = self.generate_ids(raw, beam_size, max_len, length_norm)
        return detokenize(decode_ids(hyp.tokens, vocab))


__all__ = ["R2GenMamba", "nll_loss", "pad_batch", "BOS", "EOS", "PAD"]
