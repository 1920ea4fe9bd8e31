import decimal
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from r2gen_mamba.core import COUNTER, Tensor, counting, no_grad
from r2gen_mamba.errors import ConfigError
from r2gen_mamba.ssm import (
    EncoderConfig,
    MambaBlock,
    MambaEncoder,
    SelectiveSSM,
    causal_conv1d,
    discretize_zoh,
    encode,
    project_ssm_params,
    selective_scan,
)

from gradcheck import max_relative_error

SMALL = EncoderConfig(d=16, d_state=4, d_conv=3, expand=2)


def unrolled_scan(a_bar, b_bar, C, u, d_skip):
    """Scalar loops in plain Python floats."""
    S, Ch, N = a_bar.shape
    h = [[0.0] * N for _ in range(Ch)]
    out = []
    for t in range(S):
        row = []
        for c in range(Ch):
            acc = 0.0
            for n in range(N):
                h[c][n] = float(a_bar[t, c, n]) * h[c][n] + float(b_bar[t, c, n]) * float(u[t, c])
                acc += float(C[t, n]) * h[c][n]
            row.append(acc + float(d_skip[c]) * float(u[t, c]))
        out.append(row)
    return np.array(out)


def random_scan_instance(rng):
    S, Ch, N = rng.integers(1, 17), rng.integers(1, 9), rng.integers(1, 5)
    return (rng.uniform(0, 1, (S, Ch, N)), rng.normal(size=(S, Ch, N)),
            rng.normal(size=(S, N)), rng.normal(size=(S, Ch)), rng.normal(size=Ch))


def scalar_zoh(a, delta, b):
    """Closed forms in 50-digit decimal arithmetic, free of float cancellation."""
    with decimal.localcontext() as ctx:
        ctx.prec = 50
        a, delta, b = decimal.Decimal(a), decimal.Decimal(delta), decimal.Decimal(b)
        a_bar = (delta * a).exp()
        b_bar = delta * b if a == 0 else (a_bar - 1) / a * b
        return float(a_bar), float(b_bar)


class TestScan:
    @pytest.mark.acceptance("1. SSM oracle equivalence")
    def test_matches_unrolled_recurrence_on_200_instances(self):
        rng = np.random.default_rng(2024)
        start = time.perf_counter()
        worst = 0.0
        for _ in range(200):
            args = random_scan_instance(rng)
            got = selective_scan(*(Tensor(a) for a in args)).data
            worst = max(worst, float(np.abs(got - unrolled_scan(*args)).max()))
        elapsed = time.perf_counter() - start
        print(f"scan oracle: max abs err {worst:.3e} in {elapsed:.2f}s")
        assert worst < 1e-10
        assert elapsed < 10.0

    def test_documented_instance(self):
        rng = np.random.default_rng(7)
        args = (rng.uniform(0, 1, (7, 3, 2)), rng.normal(size=(7, 3, 2)),
                rng.normal(size=(7, 2)), rng.normal(size=(7, 3)), rng.normal(size=3))
        got = selective_scan(*(Tensor(a) for a in args)).data
        assert np.abs(got - unrolled_scan(*args)).max() < 1e-10

    def test_single_step(self, rng):
        a_bar, b_bar, C, u, d = random_scan_instance(rng)
        a_bar, b_bar, C, u = a_bar[:1], b_bar[:1], C[:1], u[:1]
        got = selective_scan(Tensor(a_bar), Tensor(b_bar), Tensor(C), Tensor(u), Tensor(d)).data
        expected = np.einsum("cn,n->c", b_bar[0] * u[0][:, None], C[0]) + d * u[0]
        np.testing.assert_allclose(got[0], expected, atol=1e-14)

    def test_zero_transition_is_memoryless(self, rng):
        _, b_bar, C, u, d = random_scan_instance(rng)
        a_bar = np.zeros_like(b_bar)
        got = selective_scan(Tensor(a_bar), Tensor(b_bar), Tensor(C), Tensor(u), Tensor(d)).data
        expected = np.einsum("tcn,tn->tc", b_bar * u[:, :, None], C) + d * u
        np.testing.assert_allclose(got, expected, atol=1e-13)

    def test_causal_in_input(self, rng):
        a_bar, b_bar, C, u, d = (rng.normal(size=s) for s in [(9, 3, 2)] * 2 + [(9, 2), (9, 3), (3,)])
        base = selective_scan(*(Tensor(a) for a in (a_bar, b_bar, C, u, d))).data
        for t in range(9):
            u2 = u.copy()
            u2[t + 1:] = rng.normal(size=u2[t + 1:].shape)
            out = selective_scan(*(Tensor(a) for a in (a_bar, b_bar, C, u2, d))).data
            np.testing.assert_array_equal(out[: t + 1], base[: t + 1])

    def test_flops_linear_in_length(self, rng):
        counts = []
        for S in (8, 16, 32):
            args = [rng.normal(size=s) for s in [(S, 3, 2), (S, 3, 2), (S, 2), (S, 3), (3,)]]
            with counting():
                selective_scan(*(Tensor(a) for a in args))
                counts.append(COUNTER.flops)
        assert counts[1] == 2 * counts[0] and counts[2] == 2 * counts[1]


class TestZoh:
    @pytest.mark.acceptance("2. ZOH correctness")
    def test_limit_branch_is_exact(self):
        for delta, b in [(0.3, 1.7), (2.0, -0.5), (1e-3, 4.0)]:
            a_bar, b_bar = discretize_zoh(np.zeros((1, 1)), np.array([b]), np.array([delta]))
            assert a_bar.data[0, 0] == 1.0
            assert b_bar.data[0, 0] == delta * b

    @pytest.mark.acceptance("2. ZOH correctness")
    def test_ln2_closed_form(self):
        a_bar, b_bar = discretize_zoh(np.array([[-1.0]]), np.array([1.0]), np.array([math.log(2)]))
        assert abs(a_bar.data[0, 0] - 0.5) < 1e-12
        assert abs(b_bar.data[0, 0] - 0.5) < 1e-12

    @pytest.mark.acceptance("2. ZOH correctness")
    def test_elementwise_against_scalar_formulas(self, rng):
        A = -rng.uniform(0.01, 5, (4, 3))
        A[0, 0] = 0.0
        A[1, 2] = -1e-12
        B, delta = rng.normal(size=(6, 3)), rng.uniform(1e-3, 2, (6, 4))
        a_bar, b_bar = discretize_zoh(A, B, delta)
        for t in range(6):
            for c in range(4):
                for n in range(3):
                    ea, eb = scalar_zoh(A[c, n], delta[t, c], B[t, n])
                    assert abs(a_bar.data[t, c, n] - ea) < 1e-12
                    assert abs(b_bar.data[t, c, n] - eb) <= 1e-12 * max(1.0, abs(eb))

    def test_small_step_limit(self):
        a_bar, b_bar = discretize_zoh(np.array([[-2.0]]), np.array([3.0]), np.array([1e-12]))
        assert a_bar.data[0, 0] == pytest.approx(1.0, abs=1e-11)
        assert b_bar.data[0, 0] == pytest.approx(0.0, abs=1e-11)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-10, -1e-3), st.floats(1e-3, 10), st.floats(-5, 5))
    def test_stable_for_negative_a(self, a, delta, b):
        a_bar, _ = discretize_zoh(np.array([[a]]), np.array([b]), np.array([delta]))
        assert abs(a_bar.data[0, 0]) < 1.0


@pytest.mark.acceptance("3. gradient suite")
@pytest.mark.parametrize("a_scale", [1.0, 1e-9], ids=["regular", "limit_branch"])
def test_gradient_through_zoh_and_scan(a_scale):
    rng = np.random.default_rng(5)
    S, Ch, N = 5, 3, 2
    A = Tensor(-rng.uniform(0.2, 1.5, (Ch, N)) * a_scale, requires_grad=True)
    B = Tensor(rng.normal(size=(S, N)), requires_grad=True)
    C = Tensor(rng.normal(size=(S, N)), requires_grad=True)
    delta = Tensor(rng.uniform(0.1, 1.0, (S, Ch)), requires_grad=True)
    u = Tensor(rng.normal(size=(S, Ch)), requires_grad=True)
    d = Tensor(rng.normal(size=Ch), requires_grad=True)
    w = rng.normal(size=(S, Ch))
    if a_scale < 1:
        assert np.abs(delta.data[:, :, None] * A.data).max() < 1e-8

    def loss():
        a_bar, b_bar = discretize_zoh(A, B, delta)
        return (selective_scan(a_bar, b_bar, C, u, d) * Tensor(w)).sum()

    tensors = [B, C, delta, u, d] if a_scale < 1 else [A, B, C, delta, u, d]
    assert max_relative_error(loss, tensors) < 1e-4
    if a_scale < 1:
        # a finer step keeps the perturbed A inside the series branch
        assert max_relative_error(loss, [A], h=1e-10) < 1e-4


@pytest.mark.acceptance("3. gradient suite")
def test_gradient_through_causal_conv():
    rng = np.random.default_rng(11)
    x = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=3), requires_grad=True)
    r = rng.normal(size=(6, 3))
    assert max_relative_error(lambda: (causal_conv1d(x, w, b) * Tensor(r)).sum(), [x, w, b]) < 1e-4


@pytest.mark.acceptance("3. gradient suite")
def test_gradient_through_mamba_block():
    rng = np.random.default_rng(3)
    block = MambaBlock(SMALL, np.random.default_rng(0), dtype=np.float64)
    x = Tensor(rng.normal(size=(5, SMALL.d)), requires_grad=True)
    r = rng.normal(size=(5, SMALL.d))
    params = [p for _, p in block.named_parameters()]
    assert max_relative_error(lambda: (block(x) * Tensor(r)).sum(), [x] + params) < 1e-4


class TestConv:
    def test_causal(self, rng):
        x = rng.normal(size=(8, 2))
        w, b = rng.normal(size=(2, 3)), rng.normal(size=2)
        base = causal_conv1d(Tensor(x), Tensor(w), Tensor(b)).data
        x2 = x.copy()
        x2[5:] += 1.0
        out = causal_conv1d(Tensor(x2), Tensor(w), Tensor(b)).data
        np.testing.assert_array_equal(out[:5], base[:5])

    def test_against_direct_sum(self, rng):
        x, w, b = rng.normal(size=(6, 2)), rng.normal(size=(2, 3)), rng.normal(size=2)
        out = causal_conv1d(Tensor(x), Tensor(w), Tensor(b)).data
        for t in range(6):
            for c in range(2):
                acc = b[c] + sum(w[c, k] * x[t - 2 + k, c] for k in range(3) if t - 2 + k >= 0)
                assert out[t, c] == pytest.approx(acc, abs=1e-13)


class TestProjection:
    def setup_method(self):
        self.ssm = SelectiveSSM(SMALL, np.random.default_rng(1), dtype=np.float64)

    def test_shapes(self, rng):
        for S in (1, 4, 9):
            B, C, delta = project_ssm_params(rng.normal(size=(S, SMALL.d_inner)), self.ssm)
            assert B.shape == (S, SMALL.d_state) and C.shape == (S, SMALL.d_state)
            assert delta.shape == (S, SMALL.d_inner)

    def test_zero_weights_give_softplus_bias(self, rng):
        self.ssm.x_proj.weight.data[...] = 0.0
        bias = self.ssm.dt_proj.bias.data
        _, _, delta = project_ssm_params(rng.normal(size=(5, SMALL.d_inner)), self.ssm)
        np.testing.assert_allclose(delta.data, np.tile(np.log1p(np.exp(bias)), (5, 1)), rtol=1e-14)

    def test_matches_per_row_matvec(self, rng):
        u = rng.normal(size=(4, SMALL.d_inner))
        R, N = SMALL.dt_rank, SMALL.d_state
        Wx, Wdt = self.ssm.x_proj.weight.data, self.ssm.dt_proj.weight.data
        bdt = self.ssm.dt_proj.bias.data
        B, C, delta = project_ssm_params(u, self.ssm)
        for t in range(4):
            row = [sum(u[t, i] * Wx[i, j] for i in range(SMALL.d_inner)) for j in range(R + 2 * N)]
            raw = [sum(row[i] * Wdt[i, j] for i in range(R)) + bdt[j] for j in range(SMALL.d_inner)]
            np.testing.assert_allclose(B.data[t], row[R:R + N], atol=1e-12)
            np.testing.assert_allclose(C.data[t], row[R + N:], atol=1e-12)
            np.testing.assert_allclose(delta.data[t], [math.log1p(math.exp(v)) for v in raw],
                                       atol=1e-12)

    def test_delta_positive_and_initial_range(self):
        dt = np.log1p(np.exp(self.ssm.dt_proj.bias.data))
        assert np.all((dt >= 1e-3 - 1e-12) & (dt <= 1e-1 + 1e-12))

    def test_a_initialisation(self):
        A = self.ssm.A().data
        np.testing.assert_allclose(A, -np.tile(np.arange(1, SMALL.d_state + 1), (SMALL.d_inner, 1)),
                                   rtol=1e-15)
        assert np.all(A < 0)


class TestBlock:
    def setup_method(self):
        self.block = MambaBlock(SMALL, np.random.default_rng(2), dtype=np.float64)

    def test_shape(self, rng):
        for S in (1, 3, 11):
            assert self.block(Tensor(rng.normal(size=(S, SMALL.d)))).shape == (S, SMALL.d)

    def test_causal(self, rng):
        x = rng.normal(size=(10, SMALL.d))
        base = self.block(Tensor(x)).data
        for t in range(10):
            x2 = x.copy()
            x2[t] += rng.normal(size=SMALL.d)
            out = self.block(Tensor(x2)).data
            np.testing.assert_array_equal(out[:t], base[:t])
            assert not np.array_equal(out[t], base[t])

    def test_full_equals_stepwise(self, rng):
        x = rng.normal(size=(12, SMALL.d))
        full = self.block(Tensor(x)).data
        state = self.block.init_state()
        steps = np.stack([self.block.step(x[t], state) for t in range(12)])
        assert np.abs(full - steps).max() < 1e-12


class TestEncoder:
    def test_zero_layers_is_identity(self, rng):
        enc = MambaEncoder(EncoderConfig(d=16, n_layers=0), np.random.default_rng(0))
        x = rng.normal(size=(5, 16)).astype(np.float32)
        np.testing.assert_array_equal(encode(Tensor(x), enc).data, x)

    def test_width_mismatch(self, rng):
        enc = MambaEncoder(SMALL, np.random.default_rng(0))
        with pytest.raises(ConfigError):
            encode(Tensor(rng.normal(size=(5, 32))), enc)

    def test_width_must_divide_by_16(self):
        with pytest.raises(ConfigError):
            EncoderConfig(d=24)

    def test_default_config_finite_and_shape_preserving(self, rng):
        enc = MambaEncoder(EncoderConfig(), np.random.default_rng(0))
        x = rng.normal(size=(20, 512)).astype(np.float32)
        with no_grad():
            out = encode(Tensor(x), enc).data
        assert out.shape == (20, 512) and np.isfinite(out).all()

    def test_flops_double_with_length(self, rng):
        enc = MambaEncoder(EncoderConfig(), np.random.default_rng(0))
        counts = {}
        for S in (32, 64, 128):
            with counting(), no_grad():
                encode(Tensor(rng.normal(size=(S, 512)).astype(np.float32)), enc)
                counts[S] = COUNTER.flops
        for S in (32, 64):
            assert counts[2 * S] / counts[S] == pytest.approx(2.0, rel=0.01)

    def test_flops_linear_fit(self, rng):
        cfg = EncoderConfig(d=64, d_state=16)
        enc = MambaEncoder(cfg, np.random.default_rng(0))
        lengths = np.array([16, 32, 64, 128])
        counts = []
        for S in lengths:
            with counting(), no_grad():
                encode(Tensor(rng.normal(size=(S, 64)).astype(np.float32)), enc)
                counts.append(COUNTER.flops)
        counts = np.array(counts, dtype=float)
        slope, icpt = np.polyfit(lengths, counts, 1)
        resid = counts - (slope * lengths + icpt)
        r2 = 1 - (resid ** 2).sum() / ((counts - counts.mean()) ** 2).sum()
        assert r2 > 0.999
