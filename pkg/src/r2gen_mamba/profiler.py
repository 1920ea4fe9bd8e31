"""Analytic parameter and FLOP accounting for the Mamba encoder and a matched
Transformer-encoder baseline, plus checks against the live op counter.

Analytic FLOP counts are itemised under the same operation names the
instrumented primitives report (``matmul``, ``add``, ``silu`` ...), so a
measured forward pass can be compared op class by op class.
"""

from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import core
from .core import Tensor
from .decoder import DecoderConfig, FeedForward, MultiHeadAttention
from .errors import CountValidationError
from .nn import LayerNorm, Module
from .ssm import EncoderConfig, MambaEncoder

# externally reported (params, FLOPs), displayed beside the computed counts only
REFERENCE_MAMBA = (594_944, 58_216_000)
REFERENCE_TRANSFORMER = (4_728_000, 462_422_000)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    shapes: tuple[tuple[int, ...], ...]

    @property
    def params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes)


def linear_spec(name: str, d_in: int, d_out: int, bias: bool = True) -> LayerSpec:
    shapes = ((d_in, d_out), (d_out,)) if bias else ((d_in, d_out),)
    return LayerSpec(name, shapes)


def layer_norm_spec(name: str, d: int) -> LayerSpec:
    return LayerSpec(name, ((d,), (d,)))


def count_params(layout: list[LayerSpec]) -> int:
    return sum(layer.params for layer in layout)


# -- Mamba encoder ------------------------------------------------------------


def mamba_encoder_layout(cfg: EncoderConfig) -> list[LayerSpec]:
    d, C, N, K, R = cfg.d, cfg.d_inner, cfg.d_state, cfg.d_conv, cfg.dt_rank
    layout = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        layout += [
            layer_norm_spec(p + "norm", d),
            linear_spec(p + "in_proj", d, 2 * C, bias=False),
            LayerSpec(p + "conv", ((C, K), (C,))),
            linear_spec(p + "ssm.x_proj", C, R + 2 * N, bias=False),
            linear_spec(p + "ssm.dt_proj", R, C),
            LayerSpec(p + "ssm.a_log", ((C, N),)),
            LayerSpec(p + "ssm.d_skip", ((C,),)),
            linear_spec(p + "out_proj", C, d, bias=False),
        ]
    return layout


def mamba_encoder_flops(cfg: EncoderConfig, S: int) -> dict[str, int]:
    d, C, N, K, R = cfg.d, cfg.d_inner, cfg.d_state, cfg.d_conv, cfg.dt_rank
    per = Counter({
        "layer_norm": 7 * S * d,
        "matmul": 2 * S * d * 2 * C + 2 * S * C * (R + 2 * N) + 2 * S * R * C + 2 * S * C * d,
        "conv": 2 * S * C * K + S * C,
        "silu": 4 * S * C * 2,
        "add": S * C + S * d,  # dt_proj bias, residual
        "softplus": 3 * S * C,
        "exp": C * N,
        "neg": C * N,
        "zoh": 5 * S * C * N,
        "scan": 5 * S * C * N + 2 * S * C,
        "mul": S * C,
    })
    return {k: v * cfg.n_layers for k, v in per.items() if v}


# -- Transformer encoder baseline -------------------------------------------


@dataclass(frozen=True)
class TransformerEncoderConfig:
    d: int = 512
    n_layers: int = 3
    heads: int = 8
    d_ff: int = 2048


def transformer_encoder_layout(cfg: TransformerEncoderConfig) -> list[LayerSpec]:
    d, ff = cfg.d, cfg.d_ff
    layout = []
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        layout += [layer_norm_spec(p + "ln_attn", d)]
        layout += [linear_spec(p + f"attn.{w}", d, d) for w in "qkvo"]
        layout += [
            layer_norm_spec(p + "ln_ff", d),
            linear_spec(p + "ff.fc1", d, ff),
            linear_spec(p + "ff.fc2", ff, d),
        ]
    return layout


def transformer_encoder_flops(cfg: TransformerEncoderConfig, S: int) -> dict[str, int]:
    d, h, ff = cfg.d, cfg.heads, cfg.d_ff
    per = Counter({
        "layer_norm": 2 * 7 * S * d,
        "matmul": 4 * 2 * S * d * d + 2 * 2 * S * S * d + 2 * 2 * S * d * ff,
        "add": 4 * S * d + 2 * S * d + S * ff + S * d,  # biases + residuals
        "mul": h * S * S,  # score scaling
        "softmax": 4 * h * S * S,
        "relu": S * ff,
    })
    return {k: v * cfg.n_layers for k, v in per.items()}


class TransformerEncoderLayer(Module):
    def __init__(self, cfg: TransformerEncoderConfig, rng, dtype=np.float32):
        self.ln_attn = LayerNorm(cfg.d, dtype=dtype)
        self.attn = MultiHeadAttention(cfg.d, cfg.heads, 0.0, rng, dtype)
        self.ln_ff = LayerNorm(cfg.d, dtype=dtype)
        self.ff = FeedForward(cfg.d, cfg.d_ff, 0.0, rng, dtype)

    def forward(self, x: Tensor) -> Tensor:
        h = self.ln_attn(x)
        x = x + self.attn(h, h)
        return x + self.ff(self.ln_ff(x))


class TransformerEncoder(Module):
    """Counting baseline only; never trained."""

    def __init__(self, cfg: TransformerEncoderConfig, rng, dtype=np.float32):
        self.cfg = cfg
        self.layers = [TransformerEncoderLayer(cfg, rng, dtype) for _ in range(cfg.n_layers)]

    def forward(self, x: Tensor) -> Tensor:
        x = core.as_tensor(x)
        x = x.reshape(1, *x.shape)
        for layer in self.layers:
            x = layer(x)
        return x.reshape(*x.shape[1:])


# -- decoder (parameter count only) -------------------------------------------


def decoder_layout(cfg: DecoderConfig) -> list[LayerSpec]:
    d, ff, V = cfg.d, cfg.d_ff, cfg.vocab_size
    layout = [LayerSpec("embedding", ((V, d),))]
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        layout.append(layer_norm_spec(p + "ln_self", d))
        layout += [linear_spec(p + f"self_attn.{w}", d, d) for w in "qkvo"]
        layout.append(layer_norm_spec(p + "ln_cross", d))
        layout += [linear_spec(p + f"cross_attn.{w}", d, d) for w in "qkvo"]
        layout += [layer_norm_spec(p + "ln_ff", d), linear_spec(p + "ff.fc1", d, ff),
                   linear_spec(p + "ff.fc2", ff, d)]
    layout += [layer_norm_spec("ln_out", d), linear_spec("out_proj", d, V)]
    return layout


# -- components and reports -----------------------------------------------------


@dataclass
class Component:
    name: str
    layout: list[LayerSpec]
    flops_fn: Callable[[int], dict[str, int]]
    build: Callable[[], Module]
    reference: tuple[int, int] | None = None

    def param_count(self) -> int:
        return count_params(self.layout)

    def flops_breakdown(self, S: int) -> dict[str, int]:
        if S < 1:
            raise ValueError("sequence length must be >= 1")
        return self.flops_fn(S)

    def flops_at(self, S: int) -> int:
        return sum(self.flops_breakdown(S).values())


def mamba_component(cfg: EncoderConfig | None = None, seed: int = 0) -> Component:
    cfg = cfg or EncoderConfig()
    return Component(
        "mamba_encoder", mamba_encoder_layout(cfg), lambda S: mamba_encoder_flops(cfg, S),
        lambda: MambaEncoder(cfg, np.random.default_rng(seed)), REFERENCE_MAMBA,
    )


def transformer_component(cfg: TransformerEncoderConfig | None = None,
                          seed: int = 0) -> Component:
    cfg = cfg or TransformerEncoderConfig()
    return Component(
        "transformer_encoder", transformer_encoder_layout(cfg),
        lambda S: transformer_encoder_flops(cfg, S),
        lambda: TransformerEncoder(cfg, np.random.default_rng(seed)), REFERENCE_TRANSFORMER,
    )


def count_flops(component: Component, S: int) -> int:
    return component.flops_at(S)


@dataclass
class ComplexityReport:
    component: str
    param_count: int
    S: int
    flops: int
    breakdown: dict[str, int]
    ref_params: int | None = None
    ref_flops: int | None = None


def report_for(component: Component, S: int) -> ComplexityReport:
    ref = component.reference or (None, None)
    return ComplexityReport(component.name, component.param_count(), S,
                            component.flops_at(S), component.flops_breakdown(S), *ref)


@dataclass
class EncoderComparison:
    mamba: ComplexityReport
    transformer: ComplexityReport

    @property
    def param_ratio(self) -> float:
        return self.mamba.param_count / self.transformer.param_count

    @property
    def flop_ratio(self) -> float:
        return self.mamba.flops / self.transformer.flops

    @property
    def ref_param_ratio(self) -> float:
        return REFERENCE_MAMBA[0] / REFERENCE_TRANSFORMER[0]

    @property
    def ref_flop_ratio(self) -> float:
        return REFERENCE_MAMBA[1] / REFERENCE_TRANSFORMER[1]

    @property
    def mamba_cheaper(self) -> bool:
        return (self.mamba.param_count < self.transformer.param_count
                and self.mamba.flops < self.transformer.flops)


def compare_encoders(cfg: EncoderConfig | None = None, S: int = 98,
                     baseline: TransformerEncoderConfig | None = None) -> EncoderComparison:
    cfg = cfg or EncoderConfig()
    baseline = baseline or TransformerEncoderConfig(d=cfg.d)
    return EncoderComparison(report_for(mamba_component(cfg), S),
                             report_for(transformer_component(baseline), S))


# -- measured validation --------------------------------------------------------


@dataclass
class ValidationReport:
    component: str
    S: int
    analytic: int
    measured: int
    deltas: dict[str, tuple[int, int]] = field(default_factory=dict)
    skipped: bool = False
    notice: str = ""

    @property
    def relative_error(self) -> float:
        return abs(self.measured - self.analytic) / max(self.analytic, 1)


def measure_flops(module: Module, x: np.ndarray) -> tuple[int, dict[str, int]]:
    module.eval()
    with core.no_grad(), core.counting() as counter:
        module(Tensor(x))
        return counter.flops, dict(counter.by_op)


def validate_counts(component: Component, S: int, module: Module | None = None,
                    enabled: bool = True, tolerance: float = 0.02,
                    seed: int = 0) -> ValidationReport:
    """Compare a measured forward pass against the analytic breakdown.

    Raises :class:`CountValidationError` listing per-op deltas when the totals
    diverge by more than ``tolerance``.
    """
    analytic = component.flops_breakdown(S)
    total = sum(analytic.values())
    if not enabled:
        return ValidationReport(component.name, S, total, 0, skipped=True,
                                notice="op counter disabled; validation skipped")
    module = module if module is not None else component.build()
    width = module.cfg.d
    x = np.random.default_rng(seed).normal(size=(S, width)).astype(np.float32)
    measured, by_op = measure_flops(module, x)
    deltas = {
        op: (analytic.get(op, 0), by_op.get(op, 0))
        for op in sorted(set(analytic) | set(by_op))
        if analytic.get(op, 0) != by_op.get(op, 0)
    }
    report = ValidationReport(component.name, S, total, measured, deltas)
    if report.relative_error > tolerance:
        lines = ", ".join(f"{op}: analytic {a} measured {m}" for op, (a, m) in deltas.items())
        raise CountValidationError(
            f"{component.name} at S={S}: measured {measured} vs analytic {total} "
            f"({report.relative_error:.2%}); {lines}"
        )
    return report


# -- rendering -------------------------------------------------------------------


CSV_HEADER = ("component", "params", "flops", "S", "paper_ref_params", "paper_ref_flops")


def table_rows(cmp: EncoderComparison) -> list[tuple]:
    rows = []
    for r in (cmp.mamba, cmp.transformer):
        rows.append((r.component, r.param_count, r.flops, r.S,
                     r.ref_params if r.ref_params is not None else "",
                     r.ref_flops if r.ref_flops is not None else ""))
    return rows


def render_table(cmp: EncoderComparison) -> str:
    rows = [CSV_HEADER] + [tuple(str(c) for c in row) for row in table_rows(cmp)]
    widths = [max(len(row[i]) for row in rows) for i in range(len(CSV_HEADER))]
    out = io.StringIO()
    for j, row in enumerate(rows):
        out.write("  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                            for i, (c, w) in enumerate(zip(row, widths))).rstrip() + "\n")
        if j == 0:
            out.write("  ".join("-" * w for w in widths) + "\n")
    out.write(f"ratio (mamba/transformer): params {cmp.param_ratio:.3f}, "
              f"flops {cmp.flop_ratio:.3f}; reference params {cmp.ref_param_ratio:.3f}, "
              f"flops {cmp.ref_flop_ratio:.3f}\n")
    return out.getvalue()


def render_csv(cmp: EncoderComparison) -> str:
    out = io.StringIO()
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    writer.writerows(table_rows(cmp))
    return out.getvalue()
