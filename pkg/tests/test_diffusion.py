import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from diffac.diffusion import (
    DTYPE,
    DiffusionSampleRequest,
    NoiseSchedule,
    forward_corrupt,
    make_schedule,
    posterior_mean,
    reverse_sample,
    reverse_step,
    simple_denoising_loss,
)

from conftest import (
    AnalyticGaussianPredictor,
    ConstantPredictor,
    TwoParamPredictor,
    ZeroPredictor,
    finite_difference_grads,
    rel_error,
    w1_samples,
)


def make_forced_schedule(betas):
    betas = torch.as_tensor(betas, dtype=DTYPE)
    alphas = 1.0 - betas
    return NoiseSchedule(
        T=len(betas), betas=betas, alphas=alphas, alpha_bars=torch.cumprod(alphas, 0)
    )


class TestMakeSchedule:
    def test_forced_half_betas(self):
        s = make_forced_schedule([0.5, 0.5])
        assert torch.allclose(s.alphas, torch.tensor([0.5, 0.5], dtype=DTYPE))
        assert torch.allclose(s.alpha_bars, torch.tensor([0.5, 0.25], dtype=DTYPE))

    def test_single_step(self):
        s = make_schedule(1, 0.1, 0.1, "linear")
        assert torch.allclose(s.betas, torch.tensor([0.1], dtype=DTYPE))
        assert torch.allclose(s.alpha_bars, torch.tensor([0.9], dtype=DTYPE))

    def test_linear_product_matches_independent_loop(self):
        s = make_schedule(20, 1e-4, 0.02, "linear")
        # independent oracle: re-interpolate and re-accumulate step by step
        prod = 1.0
        for i in range(20):
            beta = 1e-4 + (0.02 - 1e-4) * i / 19
            prod *= 1.0 - beta
        assert math.isclose(float(s.alpha_bars[19]), prod, rel_tol=1e-12)

    def test_cosine_shape_is_valid(self):
        s = make_schedule(20, 1e-4, 0.999, "cosine")
        assert bool(((s.betas > 0) & (s.betas < 1)).all())
        assert bool((s.alpha_bars[1:] < s.alpha_bars[:-1]).all())
        assert float(s.alpha_bars[-1]) < 1e-2

    def test_rejects_bad_arguments(self):
        with pytest.raises(ValueError):
            make_schedule(0, 0.1, 0.2)
        with pytest.raises(ValueError):
            make_schedule(5, 0.0, 0.2)
        with pytest.raises(ValueError):
            make_schedule(5, 0.1, 1.0)
        with pytest.raises(ValueError):
            make_schedule(5, 0.3, 0.2)
        with pytest.raises(ValueError):
            make_schedule(5, 0.1, 0.2, shape="exponential")

    @given(
        T=st.integers(min_value=2, max_value=64),
        lo=st.floats(min_value=1e-5, max_value=0.3),
        hi=st.floats(min_value=0.3, max_value=0.97),
        shape=st.sampled_from(["linear", "cosine"]),
    )
    @settings(max_examples=40, deadline=None)
    def test_schedule_algebra(self, T, lo, hi, shape):
        s = make_schedule(T, lo, hi, shape)
        assert bool(torch.all(s.alphas == 1.0 - s.betas))
        # cumulative products satisfy the recurrence exactly
        assert torch.equal(s.alpha_bars[1:], s.alpha_bars[:-1] * s.alphas[1:])
        assert float(s.alpha_bars[0]) == float(s.alphas[0])
        assert bool((s.alpha_bars[1:] < s.alpha_bars[:-1]).all())


class TestForwardCorrupt:
    def test_zero_noise_scales_x0(self):
        s = make_forced_schedule([0.5, 0.5])  # abar_2 = 0.25
        x0 = torch.tensor([[1.0, -2.0, 3.0]], dtype=DTYPE)
        out = forward_corrupt(x0, 2, s, torch.zeros_like(x0))
        assert torch.allclose(out, 0.5 * x0)

    def test_zero_signal_scales_noise(self):
        s = make_forced_schedule([0.5, 0.5])
        n = torch.tensor([[0.7, -1.1]], dtype=DTYPE)
        out = forward_corrupt(torch.zeros_like(n), 2, s, n)
        assert torch.allclose(out, math.sqrt(0.75) * n)

    def test_out_of_range_t(self):
        s = make_forced_schedule([0.5, 0.5])
        x0 = torch.zeros((1, 1), dtype=DTYPE)
        with pytest.raises(ValueError):
            forward_corrupt(x0, 0, s, x0)
        with pytest.raises(ValueError):
            forward_corrupt(x0, 3, s, x0)

    def test_moments_match_closed_form(self):
        # Monte-Carlo moment oracle at 1e5 draws, 3 standard errors
        s = make_schedule(10, 0.05, 0.4, "linear")
        t = 6
        abar = float(s.alpha_bar(t))
        x0_val = 1.3
        n = 100_000
        gen = torch.Generator().manual_seed(4)
        noise = torch.randn((n, 1), generator=gen, dtype=DTYPE)
        x0 = torch.full((n, 1), x0_val, dtype=DTYPE)
        out = forward_corrupt(x0, t, s, noise).numpy().ravel()
        target_mean = math.sqrt(abar) * x0_val
        target_var = 1.0 - abar
        se_mean = math.sqrt(target_var / n)
        assert abs(out.mean() - target_mean) < 3 * se_mean
        se_var = target_var * math.sqrt(2.0 / (n - 1))
        assert abs(out.var(ddof=1) - target_var) < 3 * se_var

    def test_affine_superposition(self):
        s = make_schedule(5, 0.1, 0.3, "linear")
        gen = torch.Generator().manual_seed(3)
        x1 = torch.randn((4, 2), generator=gen, dtype=DTYPE)
        x2 = torch.randn((4, 2), generator=gen, dtype=DTYPE)
        n1 = torch.randn((4, 2), generator=gen, dtype=DTYPE)
        n2 = torch.randn((4, 2), generator=gen, dtype=DTYPE)
        lhs = forward_corrupt(x1 + x2, 3, s, n1 + n2)
        rhs = forward_corrupt(x1, 3, s, n1) + forward_corrupt(x2, 3, s, n2)
        assert torch.allclose(lhs, rhs)


class TestReverseStep:
    def test_zero_predictor_zero_eps(self):
        s = make_forced_schedule([0.75])  # alpha_1 = 0.25
        z = torch.tensor([[0.3, -0.6]], dtype=DTYPE)
        out = reverse_step(z, 1, ZeroPredictor(), None, s, torch.zeros_like(z))
        assert torch.allclose(out, 2.0 * z)

    def test_constant_predictor_at_zero(self):
        s = make_forced_schedule([0.2, 0.4])
        c = 1.7
        t = 2
        z = torch.zeros((1, 1), dtype=DTYPE)
        out = reverse_step(z, t, ConstantPredictor(c), None, s, torch.zeros_like(z))
        beta = float(s.beta(t))
        alpha = float(s.alpha(t))
        abar = float(s.alpha_bar(t))
        expected = -beta / (math.sqrt(alpha) * math.sqrt(1 - abar)) * c
        assert torch.allclose(out, torch.tensor([[expected]], dtype=DTYPE))

    def test_dimension_mismatch_rejected(self):
        s = make_forced_schedule([0.2])

        class WrongDim(torch.nn.Module):
            def forward(self, z, cond, t):
                return torch.zeros((z.shape[0], z.shape[1] + 1), dtype=DTYPE)

        with pytest.raises(ValueError):
            reverse_step(torch.zeros((2, 2), dtype=DTYPE), 1, WrongDim(), None, s)


class TestReverseSample:
    def test_single_step_zero_predictor(self):
        s = make_forced_schedule([0.19])  # 1/sqrt(alpha_1) = 1/0.9
        req = DiffusionSampleRequest(n_samples=5, sample_dim=2, stochastic=False, rng_seed=11)
        out = reverse_sample(req, ZeroPredictor(), s)
        gen = torch.Generator().manual_seed(11)
        z_T = torch.randn((5, 2), generator=gen, dtype=DTYPE)
        assert torch.allclose(out, z_T / math.sqrt(0.81))

    def test_same_seed_identical(self):
        s = make_schedule(6, 0.05, 0.4, "linear")
        pred = TwoParamPredictor()
        for stochastic in (False, True):
            req = DiffusionSampleRequest(
                n_samples=4, sample_dim=1, stochastic=stochastic, rng_seed=99
            )
            with torch.no_grad():
                a = reverse_sample(req, pred, s)
                b = reverse_sample(req, pred, s)
            assert torch.equal(a, b)

    def test_conditioning_row_broadcast(self):
        s = make_schedule(3, 0.1, 0.3, "linear")

        class CondShift(torch.nn.Module):
            def forward(self, z, cond, t):
                return cond[:, :1].expand_as(z)

        req = DiffusionSampleRequest(
            n_samples=3, sample_dim=1, conditioning=torch.tensor([0.5], dtype=DTYPE),
            stochastic=False, rng_seed=1,
        )
        out = reverse_sample(req, CondShift(), s)
        assert out.shape == (3, 1)

    def test_analytic_gaussian_chain(self):
        # Closed-form score of N(mu, sigma^2) must drive the chain to that
        # Gaussian: W1 <= 0.05 at 1e5 samples.
        mu, sigma = 0.4, 1.0
        s = make_schedule(50, 1e-4, 0.999, "cosine")
        pred = AnalyticGaussianPredictor(mu, sigma, s)
        req = DiffusionSampleRequest(n_samples=100_000, sample_dim=1, stochastic=True, rng_seed=5)
        with torch.no_grad():
            out = reverse_sample(req, pred, s).numpy().ravel()
        rng = np.random.default_rng(17)
        ref = rng.normal(mu, sigma, size=400_000)
        assert w1_samples(out, ref) <= 0.05


class TestSimpleDenoisingLoss:
    def test_perfect_prediction_gives_zero(self):
        s = make_schedule(4, 0.1, 0.3, "linear")
        B, D = 8, 2
        gen = torch.Generator().manual_seed(0)
        x0 = torch.randn((B, D), generator=gen, dtype=DTYPE)
        ts = torch.randint(1, 5, (B,), generator=gen)
        eps = torch.randn((B, D), generator=gen, dtype=DTYPE)

        class Oracle(torch.nn.Module):
            def forward(self, z, cond, t):
                return eps

        loss = simple_denoising_loss(x0, Oracle(), None, s, ts=ts, eps=eps)
        assert float(loss) == pytest.approx(0.0, abs=1e-24)

    def test_zero_predictor_estimates_dimension(self):
        # chi-square mean oracle: E||eps||^2 = D
        s = make_schedule(4, 0.1, 0.3, "linear")
        B, D = 40_000, 3
        gen = torch.Generator().manual_seed(1)
        x0 = torch.zeros((B, D), dtype=DTYPE)
        loss = simple_denoising_loss(x0, ZeroPredictor(), None, s, generator=gen)
        se = math.sqrt(2.0 * D / B)
        assert abs(float(loss) - D) < 4 * se

    def test_empty_batch_rejected(self):
        s = make_schedule(2, 0.1, 0.2)
        with pytest.raises(ValueError):
            simple_denoising_loss(torch.zeros((0, 1), dtype=DTYPE), ZeroPredictor(), None, s,
                                  generator=torch.Generator())

    def test_batch_order_invariance_with_injected_draws(self):
        s = make_schedule(6, 0.05, 0.4, "linear")
        pred = TwoParamPredictor()
        gen = torch.Generator().manual_seed(2)
        B = 16
        x0 = torch.randn((B, 1), generator=gen, dtype=DTYPE)
        ts = torch.randint(1, 7, (B,), generator=gen)
        eps = torch.randn((B, 1), generator=gen, dtype=DTYPE)
        loss = simple_denoising_loss(x0, pred, None, s, ts=ts, eps=eps)
        perm = torch.randperm(B, generator=gen)
        loss_perm = simple_denoising_loss(x0[perm], pred, None, s, ts=ts[perm], eps=eps[perm])
        assert float(loss.detach()) == pytest.approx(float(loss_perm.detach()), rel=1e-12)

    def test_gradient_matches_finite_differences(self):
        s = make_schedule(6, 0.05, 0.4, "linear")
        pred = TwoParamPredictor(0.25, -0.4)
        gen = torch.Generator().manual_seed(3)
        B = 12
        x0 = torch.randn((B, 2), generator=gen, dtype=DTYPE)
        ts = torch.randint(1, 7, (B,), generator=gen)
        eps = torch.randn((B, 2), generator=gen, dtype=DTYPE)

        def loss_fn():
            return simple_denoising_loss(x0, pred, None, s, ts=ts, eps=eps)

        loss = loss_fn()
        loss.backward()
        fd = finite_difference_grads(loss_fn, list(pred.parameters()))
        for p, g in zip(pred.parameters(), fd):
            assert rel_error(p.grad, g) <= 1e-4


class TestPosteriorMean:
    def test_final_step_collapses_to_x0(self):
        s = make_schedule(5, 0.1, 0.3, "linear")
        gen = torch.Generator().manual_seed(4)
        z = torch.randn((3, 2), generator=gen, dtype=DTYPE)
        x0 = torch.randn((3, 2), generator=gen, dtype=DTYPE)
        assert torch.allclose(posterior_mean(z, x0, 1, s), x0)

    def test_zero_inputs(self):
        s = make_schedule(5, 0.1, 0.3, "linear")
        z = torch.zeros((2, 1), dtype=DTYPE)
        assert torch.allclose(posterior_mean(z, z, 3, s), z)

    def test_against_recomputed_coefficients(self):
        # algebraic oracle: rebuild the coefficients from a separate
        # accumulation of the alpha ladder
        s = make_schedule(7, 0.05, 0.35, "linear")
        t = 4
        betas = s.betas.numpy()
        alphas = 1.0 - betas
        abars = np.concatenate([[1.0], np.cumprod(alphas)])  # abars[t] = abar_t
        c_x0 = math.sqrt(abars[t - 1]) * betas[t - 1] / (1.0 - abars[t])
        c_zt = math.sqrt(alphas[t - 1]) * (1.0 - abars[t - 1]) / (1.0 - abars[t])
        gen = torch.Generator().manual_seed(5)
        z = torch.randn((4, 3), generator=gen, dtype=DTYPE)
        x0 = torch.randn((4, 3), generator=gen, dtype=DTYPE)
        expected = c_x0 * x0 + c_zt * z
        assert torch.allclose(posterior_mean(z, x0, t, s), expected, rtol=1e-12)

    def test_out_of_range(self):
        s = make_schedule(3, 0.1, 0.3, "linear")
        z = torch.zeros((1, 1), dtype=DTYPE)
        with pytest.raises(ValueError):
            posterior_mean(z, z, 0, s)
        with pytest.raises(ValueError):
            posterior_mean(z, z, 4, s)
