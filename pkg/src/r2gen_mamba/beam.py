"""Beam search over an arbitrary next-token log-probability function."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ContractError
from .text import BOS, EOS

StepFn = Callable[[tuple[int, ...]], np.ndarray]


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    log_prob: float
    finished: bool = False

    def score(self, length_norm: float = 0.0) -> float:
        if length_norm == 0.0:
            return self.log_prob
        return self.log_prob / max(len(self.tokens) - 1, 1) ** length_norm


def rank_key(h: Hypothesis, length_norm: float = 0.0):
    return (-h.score(length_norm), h.tokens)


def beam_search(
    step: StepFn,
    beam_size: int = 3,
    max_len: int = 60,
    length_norm: float = 0.0,
    bos: int = BOS,
    eos: int = EOS,
) -> Hypothesis:
    """Return the best hypothesis.

    ``step(prefix)`` gives log-probabilities over the vocabulary for the next
    token; ``-inf`` entries are never expanded. ``max_len`` bounds the number
    of generated tokens (EOS included). At each step the ``beam_size`` best
    expansions survive; those ending in EOS are retired to the finished pool,
    and beams still alive at ``max_len`` join the pool unfinished. Ranking is
    by ``log_prob / length**length_norm``, ties going to the lexicographically
    smallest token sequence.
    """
    if beam_size < 1:
        raise ContractError("beam_size must be >= 1")
    alive = [Hypothesis((bos,), 0.0)]
    pool: list[Hypothesis] = []
    for _ in range(max_len):
        candidates = []
        for hyp in alive:
            log_probs = np.asarray(step(hyp.tokens), dtype=np.float64)
            for tok in np.flatnonzero(np.isfinite(log_probs)):
                tok = int(tok)
                candidates.append(Hypothesis(
                    hyp.tokens + (tok,), hyp.log_prob + float(log_probs[tok]), tok == eos
                ))
        candidates.sort(key=rank_key)
        alive = []
        for hyp in candidates[:beam_size]:
            (pool if hyp.finished else alive).append(hyp)
        if not alive:
            break
    pool.extend(alive)
    if not pool:
        return Hypothesis((bos, eos), 0.0, True)
    return min(pool, key=lambda h: rank_key(h, length_norm))


def greedy_decode(step: StepFn, max_len: int, bos: int = BOS, eos: int = EOS) -> Hypothesis:
    """Argmax decoding; ties go to the smallest token id."""
    tokens, total = (bos,), 0.0
    for _ in range(max_len):
        log_probs = np.asarray(step(tokens), dtype=np.float64)
        tok = int(np.argmax(log_probs))
        tokens, total = tokens + (tok,), total + float(log_probs[tok])
        if tok == eos:
            return Hypothesis(tokens, total, True)
    return Hypothesis(tokens, total, False)
