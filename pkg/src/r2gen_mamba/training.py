"""Teacher-forced maximum-likelihood training with Adam.

Two learning-rate groups (feature projection vs everything else), both
multiplied by ``decay`` once per epoch. After each epoch the model is scored
by greedy-decoding BLEU-4 on the validation split and the best state is kept.

Randomness (batch order, dropout masks) comes from a per-epoch generator
seeded by a 64-bit state that advances with splitmix64, so a checkpoint only
has to store that one integer to resume bit-exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import TrainConfig
from .errors import ContractError, NumericOverflowError, TrainingDivergedError
from .metrics import bleu
from .model import R2GenMamba
from .nn import set_dropout_rng
from .text import EOS

log = logging.getLogger(__name__)

_MASK64 = 0xFFFFFFFFFFFFFFFF


def splitmix64(state: int) -> int:
    z = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


class Adam:
    """Bias-corrected Adam keyed by parameter name."""

    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, named_params, lrs: dict[str, float]) -> None:
        named_params = list(named_params)
        for name, p in named_params:
            if p.grad is None:
                raise ContractError(f"parameter {name} has no gradient")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
        for name, p in named_params:
            g = p.grad
            m = self.m.get(name)
            v = self.v.get(name)
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * (g * g)
            self.m[name], self.v[name] = m, v
            update = lrs[name] * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - update).astype(p.dtype, copy=False)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step: int, dtype) -> None:
        self.step_count = step
        self.m = {k[7:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("adam.m.")}
        self.v = {k[7:]: v.astype(dtype) for k, v in tensors.items() if k.startswith("adam.v.")}


def adam_step(named_params, state: Adam, lr: float | dict[str, float]) -> None:
    named_params = list(named_params)
    if not isinstance(lr, dict):
        lr = {name: lr for name, _ in named_params}
    state.step(named_params, lr)


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> tuple[float, float]:
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    factor = cfg.decay ** epoch
    return cfg.lr_visual * factor, cfg.lr_other * factor


@dataclass
class Sample:
    """One training or evaluation pair: raw patch features and report ids."""

    raw: object
    ids: list[int]
    tokens: list[str] = field(default_factory=list)
    id: str = ""


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_bleu4: float | None
    lr_visual: float
    lr_other: float


@dataclass
class TrainResult:
    best: Checkpoint
    last: Checkpoint
    log: list[EpochLog]


def snapshot(model: R2GenMamba, cfg: TrainConfig, opt: Adam, epoch: int,
             rng_state: int, best_bleu4: float, best_epoch: int) -> Checkpoint:
    params = {n: p.data.astype(np.float32, copy=True) for n, p in model.named_parameters()}
    optim = {k: v.astype(np.float32, copy=True) for k, v in opt.state_tensors().items()}
    return Checkpoint(model.cfg, cfg, params, optim, opt.step_count, epoch,
                      rng_state, best_bleu4, best_epoch)


def greedy_bleu4(model: R2GenMamba, samples: Sequence[Sample], vocab_tokens) -> float:
    corpus = []
    for s in samples:
        hyp = model.generate_ids(s.raw, beam_size=1)
        cand = [vocab_tokens[i] for i in hyp.tokens[1:] if i != EOS]
        ref = [vocab_tokens[i] for i in s.ids[1:-1]]
        corpus.append((cand, ref))
    return bleu(corpus, 4)[3]


def _batches(order: np.ndarray, size: int):
    for start in range(0, len(order), size):
        yield sorted(int(i) for i in order[start:start + size])


def train(
    train_set: Sequence[Sample],
    model: R2GenMamba,
    cfg: TrainConfig,
    val_set: Sequence[Sample] = (),
    vocab_tokens: Sequence[str] | None = None,
    resume: Checkpoint | None = None,
    out_dir: str | Path | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
) -> TrainResult:
    """Run ``cfg.epochs`` epochs (continuing from ``resume`` if given).

    Without a validation set (or vocabulary) the last epoch is the best one.
    """
    if not train_set:
        raise ContractError("training set is empty")
    opt = Adam()
    groups = model.param_groups()
    if resume is not None:
        resume.restore_params(model)
        opt.load_state_tensors(resume.optim, resume.step, model.dtype)
        start, rng_state = resume.epoch, resume.rng_state
        best_bleu4, best_epoch = resume.best_bleu4, resume.best_epoch
        best = resume
    else:
        start, rng_state = 0, splitmix64(cfg.seed)
        best_bleu4, best_epoch, best = -1.0, -1, None
    history: list[EpochLog] = []
    last = resume
    score_val = bool(val_set) and vocab_tokens is not None

    for epoch in range(start, cfg.epochs):
        rng = np.random.default_rng(rng_state)
        model.train()
        set_dropout_rng(model, rng)
        lr_v, lr_o = lr_at_epoch(cfg, epoch)
        lrs = {n: lr_v for n in groups["visual"]} | {n: lr_o for n in groups["other"]}
        losses = []
        order = rng.permutation(len(train_set))
        for b, idx in enumerate(_batches(order, cfg.batch_size)):
            batch = [train_set[i] for i in idx]
            model.zero_grad()
            try:
                loss = model.loss([s.raw for s in batch], [s.ids for s in batch])
            except NumericOverflowError as exc:
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {b} (samples {idx}): {exc}"
                ) from exc
            if not math.isfinite(loss.item()):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}, batch {b}")
            loss.backward()
            opt.step(model.named_parameters(), lrs)
            losses.append(loss.item())
        set_dropout_rng(model, None)
        rng_state = splitmix64(rng_state)

        val_bleu4 = greedy_bleu4(model, val_set, vocab_tokens) if score_val else None
        entry = EpochLog(epoch, float(np.mean(losses)), val_bleu4, lr_v, lr_o)
        history.append(entry)
        log.info("epoch %d loss %.4f val_bleu4 %s", epoch, entry.train_loss, val_bleu4)

        improved = not score_val or val_bleu4 > best_bleu4
        if improved:
            best_bleu4 = val_bleu4 if score_val else best_bleu4
            best_epoch = epoch
        last = snapshot(model, cfg, opt, epoch + 1, rng_state, best_bleu4, best_epoch)
        if improved:
            best = last
        if out_dir is not None:
            out = Path(out_dir)
            save_checkpoint(out / "last.ckpt", last)
            if improved:
                save_checkpoint(out / "best.ckpt", best)
        if on_epoch is not None:
            on_epoch(entry)

    if last is None:
        last = snapshot(model, cfg, opt, start, rng_state, best_bleu4, best_epoch)
    model.eval()
    return TrainResult(best if best is not None else last, last, history)
