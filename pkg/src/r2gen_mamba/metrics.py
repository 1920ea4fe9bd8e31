"""Report-quality metrics: corpus BLEU, exact-match METEOR, ROUGE-L and
clinical-efficacy precision/recall/F1 over 14-way label vectors.

Each corpus is a sequence of ``(candidate_tokens, reference_tokens)`` pairs
with a single reference per candidate.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ContractError, SchemaError

Pair = tuple[Sequence[str], Sequence[str]]
NUM_LABELS = 14


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(corpus: Sequence[Pair], n: int) -> tuple[int, int]:
    """Clipped n-gram matches and candidate n-gram total, pooled over the corpus."""
    matched = total = 0
    for cand, ref in corpus:
        c, r = _ngrams(cand, n), _ngrams(ref, n)
        matched += sum(min(k, r[g]) for g, k in c.items())
        total += sum(c.values())
    return matched, total


def bleu(corpus: Sequence[Pair], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..BLEU-max_n with uniform weights and brevity penalty."""
    if not corpus:
        raise ContractError("BLEU needs a non-empty corpus")
    c_len = sum(len(c) for c, _ in corpus)
    r_len = sum(len(r) for _, r in corpus)
    if c_len == 0:
        return [0.0] * max_n
    bp = 1.0 if c_len >= r_len else math.exp(1.0 - r_len / c_len)
    log_p = []
    scores = []
    for n in range(1, max_n + 1):
        matched, total = modified_precision(corpus, n)
        log_p.append(math.log(matched / total) if matched else -math.inf)
        if any(lp == -math.inf for lp in log_p):
            scores.append(0.0)
        else:
            scores.append(bp * math.exp(sum(log_p) / n))
    return scores


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(cand: Sequence[str], ref: Sequence[str], beta: float = 1.2) -> float:
    if not cand or not ref:
        return 0.0
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(corpus: Sequence[Pair], beta: float = 1.2) -> float:
    if not corpus:
        raise ContractError("ROUGE-L needs a non-empty corpus")
    return sum(rouge_l_pair(c, r, beta) for c, r in corpus) / len(corpus)


def align_exact(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Left-to-right exact unigram alignment: each candidate token takes the
    earliest unused identical reference token."""
    used = [False] * len(ref)
    pairs = []
    for i, tok in enumerate(cand):
        for j, other in enumerate(ref):
            if not used[j] and other == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def count_chunks(alignment: list[tuple[int, int]]) -> int:
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or (i, j) != (prev[0] + 1, prev[1] + 1):
            chunks += 1
        prev = (i, j)
    return chunks


def meteor_pair(cand, ref, alpha: float = 0.9, beta: float = 3.0, gamma: float = 0.5) -> float:
    alignment = align_exact(cand, ref)
    m = len(alignment)
    if m == 0:
        return 0.0
    p, r = m / len(cand), m / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (count_chunks(alignment) / m) ** beta
    return f_mean * (1.0 - penalty)


def meteor(corpus: Sequence[Pair], alpha: float = 0.9, beta: float = 3.0,
           gamma: float = 0.5) -> float:
    """Exact-match METEOR (no stemming or synonyms), averaged over pairs."""
    if not corpus:
        raise ContractError("METEOR needs a non-empty corpus")
    return sum(meteor_pair(c, r, alpha, beta, gamma) for c, r in corpus) / len(corpus)


def _prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def _label_arrays(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    if len(pred) != len(truth):
        raise ContractError(f"{len(pred)} predicted label vectors vs {len(truth)} references")
    p = np.asarray(pred, dtype=bool).reshape(len(pred), -1)
    t = np.asarray(truth, dtype=bool).reshape(len(truth), -1)
    if p.shape != t.shape:
        raise ContractError(f"label shapes differ: {p.shape} vs {t.shape}")
    return p, t


def ce_metrics(pred, truth) -> tuple[float, float, float]:
    """Micro-averaged precision, recall and F1 over all (report, category) cells."""
    p, t = _label_arrays(pred, truth)
    tp = int((p & t).sum())
    fp = int((p & ~t).sum())
    fn = int((~p & t).sum())
    return _prf(tp, fp, fn)


def ce_metrics_macro(pred, truth) -> tuple[float, float, float]:
    """Per-category precision/recall/F1, averaged over categories."""
    p, t = _label_arrays(pred, truth)
    rows = [
        _prf(int((p[:, k] & t[:, k]).sum()), int((p[:, k] & ~t[:, k]).sum()),
             int((~p[:, k] & t[:, k]).sum()))
        for k in range(p.shape[1])
    ]
    return tuple(float(np.mean(col)) for col in zip(*rows))


@dataclass
class MetricReport:
    bleu1: float | None = None
    bleu2: float | None = None
    bleu3: float | None = None
    bleu4: float | None = None
    meteor_exact: float | None = None
    rouge_l: float | None = None
    ce_precision: float | None = None
    ce_recall: float | None = None
    ce_f1: float | None = None
    ce_macro_precision: float | None = None
    ce_macro_recall: float | None = None
    ce_macro_f1: float | None = None

    def as_dict(self) -> dict[str, float]:
        return {k: v for k, v in asdict(self).items() if v is not None}


def evaluate_corpus(corpus: Sequence[Pair], pred_labels=None, true_labels=None) -> MetricReport:
    b = bleu(corpus, 4)
    report = MetricReport(*b, meteor_exact=meteor(corpus), rouge_l=rouge_l(corpus))
    if pred_labels is not None and true_labels is not None:
        report.ce_precision, report.ce_recall, report.ce_f1 = ce_metrics(pred_labels, true_labels)
        (report.ce_macro_precision, report.ce_macro_recall,
         report.ce_macro_f1) = ce_metrics_macro(pred_labels, true_labels)
    return report


def read_label_file(path) -> dict[str, list[int]]:
    """``id,b1,...,b14`` per line; a line of 14 bare digits is keyed by its
    zero-based line index."""
    labels: dict[str, list[int]] = {}
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split(",")]
        if len(fields) == NUM_LABELS:
            key, bits = str(len(labels)), fields
        elif len(fields) == NUM_LABELS + 1:
            key, bits = fields[0], fields[1:]
        else:
            raise SchemaError(f"{path}:{lineno}: expected {NUM_LABELS} labels")
        if any(b not in ("0", "1") for b in bits):
            raise SchemaError(f"{path}:{lineno}: labels must be 0 or 1")
        labels[key] = [int(b) for b in bits]
    return labels
