"""Deterministic toy feature/report pairs for smoke runs and tests."""

from __future__ import annotations

import numpy as np


def synthetic_pairs(n: int = 16, n_words: int = 40, seq_len: int = 8, feat_dim: int = 16,
                    min_words: int = 4, max_words: int = 10, seed: int = 0):
    """``n`` pairs of random patch features ``[seq_len, feat_dim]`` and
    distinct reports drawn from a lexicon of ``n_words`` words."""
    rng = np.random.default_rng(seed)
    lexicon = [f"w{i}" for i in range(n_words)]
    feats, reports, seen = [], [], set()
    while len(reports) < n:
        k = int(rng.integers(min_words, max_words + 1))
        words = tuple(lexicon[int(i)] for i in rng.integers(0, n_words, k))
        if words in seen:
            continue
        seen.add(words)
        reports.append(" ".join(words) + " .")
        feats.append(rng.normal(size=(seq_len, feat_dim)).astype(np.float32))
    return feats, reports
