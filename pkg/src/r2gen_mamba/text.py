"""Report tokenisation and vocabulary handling."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ContractError, SchemaError
from .io import atomic_write_text

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

_NON_TOKEN = re.compile(r"[^a-z0-9 .]")


def tokenize(text: str) -> list[str]:
    """Lowercase, blank out everything but ``[a-z0-9 .]``, split periods off."""
    text = _NON_TOKEN.sub(" ", text.lower()).replace(".", " . ")
    return text.split()


@dataclass
class Vocabulary:
    tokens: list[str]
    min_freq: int = 1
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:4]) != SPECIALS:
            raise SchemaError("vocabulary must start with the four special markers")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise SchemaError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK)

    def save(self, path) -> None:
        atomic_write_text(path, "".join(t + "\n" for t in self.tokens))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(reports: Iterable[str], min_freq: int = 3) -> Vocabulary:
    """Tokens seen at least ``min_freq`` times, by descending frequency then
    alphabetically."""
    counts = Counter()
    for report in reports:
        counts.update(tokenize(report))
    if not counts:
        raise ContractError("cannot build a vocabulary from empty training text")
    kept = [t for t, c in counts.items() if c >= min_freq and t not in SPECIALS]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(list(SPECIALS) + kept, min_freq)


def encode_report(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    if max_len < 2:
        raise ContractError("max_len must leave room for BOS and EOS")
    ids = [vocab.id(t) for t in tokenize(text)][: max_len - 2]
    return [BOS] + ids + [EOS]


def decode_ids(ids: Iterable[int], vocab: Vocabulary) -> list[str]:
    """Tokens between BOS and the first EOS, with specials removed."""
    out = []
    for i in ids:
        if i == EOS:
            break
        if i in (PAD, BOS):
            continue
        out.append(vocab.tokens[i])
    return out


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)
