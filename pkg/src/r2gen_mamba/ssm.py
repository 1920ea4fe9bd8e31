"""Selective state-space encoder.

The encoder is a stack of pre-norm residual Mamba blocks. Inside each block
the input-dependent parameters ``(B_t, C_t, delta_t)`` are projected from the
convolved stream, the diagonal state matrix is discretised by zero-order hold
and a causal linear recurrence produces the output:

    a_bar = exp(delta * a)
    b_bar = (exp(delta * a) - 1) / a * b
    h_t   = a_bar_t * h_{t-1} + b_bar_t * u_t
    v_t   = C_t . h_t + d_skip * u_t

All three heavy primitives (causal depthwise convolution, discretisation and
the scan) are fused ops with hand-written backward passes; the scan is a plain
loop over time, so cost is linear in sequence length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import core
from .core import Tensor, apply, as_tensor
from .errors import ConfigError, DimensionError
from .nn import LayerNorm, Linear, Module, parameter

# below this |delta * a| the (exp(z) - 1) / z factor is evaluated by its series
ZOH_LIMIT = 1e-8
_PHI_PRIME_SERIES = 1e-4


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 512
    d_state: int = 16
    d_conv: int = 4
    expand: int = 2
    n_layers: int = 1

    def __post_init__(self):
        for name in ("d", "d_state", "d_conv", "expand"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"encoder {name} must be positive")
        if self.n_layers < 0:
            raise ConfigError("encoder n_layers must be >= 0")
        if self.d % 16:
            raise ConfigError(f"encoder width {self.d} is not divisible by 16")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d

    @property
    def dt_rank(self) -> int:
        return self.d // 16


# -- fused primitives ---------------------------------------------------------


def causal_conv1d(x, weight, bias) -> Tensor:
    """Depthwise causal convolution over axis 0.

    ``x`` is ``[S, C]``, ``weight`` is ``[C, K]`` and ``bias`` is ``[C]``;
    output position ``t`` sees inputs ``t-K+1 .. t`` only.
    """
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    S, C = x.shape
    K = weight.shape[1]
    if weight.shape[0] != C or bias.shape != (C,):
        raise DimensionError(f"conv weight {weight.shape} / bias {bias.shape} vs channels {C}")
    xp = np.concatenate([np.zeros((K - 1, C), dtype=x.dtype), x.data], axis=0)
    out = np.broadcast_to(bias.data, (S, C)).copy()
    for k in range(K):
        out += xp[k:k + S] * weight.data[:, k]

    def backward(g):
        gxp = np.zeros_like(xp)
        gw = np.empty_like(weight.data)
        for k in range(K):
            gxp[k:k + S] += g * weight.data[:, k]
            gw[:, k] = (g * xp[k:k + S]).sum(axis=0)
        return gxp[K - 1:], gw, g.sum(axis=0)

    return apply(out, (x, weight, bias), backward, "conv", 2 * S * C * K + S * C)


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with its removable singularity filled in."""
    small = np.abs(z) < ZOH_LIMIT
    safe = np.where(small, 1.0, z)
    return np.where(small, 1.0 + 0.5 * z, np.expm1(safe) / safe)


def _phi_prime(z: np.ndarray) -> np.ndarray:
    small = np.abs(z) < _PHI_PRIME_SERIES
    safe = np.where(small, 1.0, z)
    exact = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    return np.where(small, 0.5 + z / 3.0 + z * z / 8.0, exact)


def discretize_zoh(A, B, delta) -> tuple[Tensor, Tensor]:
    """Zero-order-hold discretisation of a diagonal state matrix.

    ``A`` is ``[C, N]`` (strictly negative in the model), ``B`` is ``[..., N]``
    and ``delta`` is ``[..., C]`` with matching leading axes (one timestep or a
    whole sequence). Returns ``(A_bar, B_bar)``, each ``[..., C, N]``.
    """
    A, B, delta = as_tensor(A), as_tensor(B), as_tensor(delta)
    if A.ndim != 2 or B.shape[-1] != A.shape[1] or delta.shape[-1] != A.shape[0]:
        raise DimensionError(f"discretize shapes A{A.shape} B{B.shape} delta{delta.shape}")
    a = A.data
    dl = delta.data[..., :, None]
    b = B.data[..., None, :]
    z = dl * a
    a_bar = np.exp(z)
    small = np.abs(z) < ZOH_LIMIT
    a_safe = np.where(small, 1.0, a)
    coef = np.where(small, dl * _phi(z), np.expm1(np.where(small, 0.0, z)) / a_safe)
    b_bar = (coef * b).astype(a_bar.dtype, copy=False)
    lead = tuple(range(a_bar.ndim - 2))

    def back_a_bar(g):
        gz = g * a_bar
        return (gz * dl).sum(axis=lead), (gz * a).sum(axis=-1)

    def back_b_bar(g):
        gb = g * b
        g_a = (gb * dl * dl * _phi_prime(z)).sum(axis=lead)
        g_b = (g * coef).sum(axis=-2)
        g_delta = (gb * a_bar).sum(axis=-1)
        return g_a, g_b, g_delta

    n = a_bar.size
    out_a = apply(a_bar, (A, delta), back_a_bar, "zoh", 2 * n)
    out_b = apply(b_bar, (A, B, delta), back_b_bar, "zoh", 3 * n)
    return out_a, out_b


def selective_scan(a_bar, b_bar, C, u, d_skip) -> Tensor:
    """Run ``h_t = a_bar_t*h_{t-1} + b_bar_t*u_t``, ``v_t = C_t.h_t + d_skip*u_t``.

    Shapes: ``a_bar``/``b_bar`` ``[S, C, N]``, ``C`` ``[S, N]``, ``u`` ``[S, C]``,
    ``d_skip`` ``[C]``; returns ``[S, C]``. ``h_0 = 0``.
    """
    a_bar, b_bar, C, u, d_skip = (as_tensor(t) for t in (a_bar, b_bar, C, u, d_skip))
    S, Ch, N = a_bar.shape
    if b_bar.shape != (S, Ch, N) or C.shape != (S, N) or u.shape != (S, Ch) \
            or d_skip.shape != (Ch,):
        raise DimensionError(
            f"scan shapes a_bar{a_bar.shape} b_bar{b_bar.shape} C{C.shape} "
            f"u{u.shape} d_skip{d_skip.shape}"
        )
    ab, bb, cm, uu = a_bar.data, b_bar.data, C.data, u.data
    hs = np.empty_like(ab)
    h = np.zeros((Ch, N), dtype=ab.dtype)
    for t in range(S):
        h = ab[t] * h + bb[t] * uu[t][:, None]
        hs[t] = h
    v = np.einsum("tcn,tn->tc", hs, cm) + d_skip.data * uu

    def backward(g):
        g_ab = np.empty_like(ab)
        g_bb = np.empty_like(bb)
        g_u = g * d_skip.data
        g_c = np.einsum("tc,tcn->tn", g, hs)
        gh = np.zeros((Ch, N), dtype=ab.dtype)
        for t in range(S - 1, -1, -1):
            gh = gh + g[t][:, None] * cm[t]
            h_prev = hs[t - 1] if t > 0 else 0.0
            g_ab[t] = gh * h_prev
            g_bb[t] = gh * uu[t][:, None]
            g_u[t] += (gh * bb[t]).sum(axis=1)
            gh = gh * ab[t]
        g_d = (g * uu).sum(axis=0)
        return g_ab, g_bb, g_c, g_u, g_d

    flops = 5 * S * Ch * N + 2 * S * Ch
    return apply(v, (a_bar, b_bar, C, u, d_skip), backward, "scan", flops)


# -- modules ------------------------------------------------------------------


class SelectiveSSM(Module):
    """Input-dependent SSM parameters and the discretise-then-scan core."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32,
                 dt_min: float = 1e-3, dt_max: float = 1e-1):
        C, N, R = cfg.d_inner, cfg.d_state, cfg.dt_rank
        self.d_state, self.dt_rank = N, R
        self.x_proj = Linear(C, R + 2 * N, rng, bias=False, dtype=dtype)
        self.dt_proj = Linear(R, C, rng, bias=True, dtype=dtype)
        bound = R ** -0.5
        self.dt_proj.weight.data[...] = rng.uniform(-bound, bound, (R, C))
        dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), C))
        # inverse softplus so that softplus(bias) == dt
        self.dt_proj.bias.data[...] = dt + np.log(-np.expm1(-dt))
        a = np.tile(np.arange(1, N + 1, dtype=np.float64), (C, 1))
        self.a_log = parameter(np.log(a), dtype)
        self.d_skip = parameter(np.ones(C), dtype)

    def project(self, u: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """``(B, C, delta)`` from the stream ``u`` of shape ``[S, d_inner]``."""
        R, N = self.dt_rank, self.d_state
        x_dbl = self.x_proj(u)
        dt_raw = x_dbl[:, :R]
        B = x_dbl[:, R:R + N]
        C = x_dbl[:, R + N:]
        delta = core.softplus(self.dt_proj(dt_raw))
        return B, C, delta

    def A(self) -> Tensor:
        return -core.exp(self.a_log)

    def forward(self, u: Tensor) -> Tensor:
        B, C, delta = self.project(u)
        a_bar, b_bar = discretize_zoh(self.A(), B, delta)
        return selective_scan(a_bar, b_bar, C, u, self.d_skip)


def project_ssm_params(u, ssm: SelectiveSSM) -> tuple[Tensor, Tensor, Tensor]:
    return ssm.project(as_tensor(u))


class MambaBlock(Module):
    """Pre-norm residual block: in_proj -> (conv -> silu -> SSM) * silu(gate) -> out_proj."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        d, C, K = cfg.d, cfg.d_inner, cfg.d_conv
        self.d_inner, self.d_conv = C, K
        self.norm = LayerNorm(d, dtype=dtype)
        self.in_proj = Linear(d, 2 * C, rng, bias=False, dtype=dtype)
        bound = 1.0 / math.sqrt(K)
        self.conv_weight = parameter(rng.uniform(-bound, bound, (C, K)), dtype)
        self.conv_bias = parameter(rng.uniform(-bound, bound, C), dtype)
        self.ssm = SelectiveSSM(cfg, rng, dtype)
        self.out_proj = Linear(C, d, rng, bias=False, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        C = self.d_inner
        xz = self.in_proj(self.norm(x))
        stream, gate = xz[:, :C], xz[:, C:]
        stream = core.silu(causal_conv1d(stream, self.conv_weight, self.conv_bias))
        v = self.ssm(stream)
        return x + self.out_proj(v * core.silu(gate))

    # -- stateful single-step evaluation (inference only) --------------------

    def init_state(self, dtype=np.float64) -> dict[str, np.ndarray]:
        return {
            "conv": np.zeros((self.d_conv - 1, self.d_inner), dtype=dtype),
            "h": np.zeros((self.d_inner, self.ssm.d_state), dtype=dtype),
        }

    def step(self, x_t: np.ndarray, state: dict[str, np.ndarray]) -> np.ndarray:
        """Advance one position, carrying the conv window and SSM state."""
        C, R, N = self.d_inner, self.ssm.dt_rank, self.ssm.d_state
        p = lambda t: t.data.astype(np.float64)  # noqa: E731
        x_t = np.asarray(x_t, dtype=np.float64)
        mu = x_t.mean()
        var = ((x_t - mu) ** 2).mean()
        n = (x_t - mu) / np.sqrt(var + self.norm.eps) * p(self.norm.gain) + p(self.norm.bias)
        xz = n @ p(self.in_proj.weight)
        s, gate = xz[:C], xz[C:]
        window = np.vstack([state["conv"], s[None, :]])
        s = (window * p(self.conv_weight).T).sum(axis=0) + p(self.conv_bias)
        state["conv"] = window[1:]
        s = s / (1.0 + np.exp(-s))
        x_dbl = s @ p(self.ssm.x_proj.weight)
        dt = x_dbl[:R] @ p(self.ssm.dt_proj.weight) + p(self.ssm.dt_proj.bias)
        delta = np.logaddexp(0.0, dt)
        b, c = x_dbl[R:R + N], x_dbl[R + N:]
        a = -np.exp(p(self.ssm.a_log))
        z = delta[:, None] * a
        b_bar = np.expm1(z) / a * b
        state["h"] = np.exp(z) * state["h"] + b_bar * s[:, None]
        v = state["h"] @ c + p(self.ssm.d_skip) * s
        y = (v * gate / (1.0 + np.exp(-gate))) @ p(self.out_proj.weight)
        return x_t + y


class MambaEncoder(Module):
    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.layers = [MambaBlock(cfg, rng, dtype) for _ in range(cfg.n_layers)]

    def forward(self, features: Tensor) -> Tensor:
        features = as_tensor(features)
        if features.ndim != 2 or features.shape[1] != self.cfg.d:
            raise ConfigError(
                f"feature width {features.shape[-1]} does not match encoder width {self.cfg.d}"
            )
        x = features
        for layer in self.layers:
            x = layer(x)
        return x


def encode(features, encoder: MambaEncoder) -> Tensor:
    return encoder(features)
