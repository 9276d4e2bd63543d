import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffac.entropy import (
    AlphaController,
    GmmFit,
    default_target_entropy,
    e_step_responsibilities,
    em_fit,
    em_fit_batch,
    estimate_policy_entropy,
    gmm_entropy,
    gmm_log_density,
    gmm_log_density_batch,
    update_alpha,
)


def make_fit(weights, means, variances):
    w = np.asarray(weights, dtype=np.float64)
    m = np.atleast_2d(np.asarray(means, dtype=np.float64))
    if m.shape[0] != w.shape[0]:
        m = m.T
    v = np.atleast_2d(np.asarray(variances, dtype=np.float64))
    if v.shape[0] != w.shape[0]:
        v = v.T
    return GmmFit(weights=w, means=m, variances=v, log_likelihood=0.0,
                  n_iters=0, converged=True)


class TestEmFit:
    def test_single_component_closed_form(self):
        rng = np.random.default_rng(0)
        X = rng.normal(1.5, 0.7, size=(200, 1))
        fit = em_fit(X, K=1, seed=3)
        assert fit.weights == pytest.approx([1.0])
        assert fit.means[0, 0] == pytest.approx(X.mean(), abs=1e-9)
        assert fit.variances[0, 0] == pytest.approx(X.var(), abs=1e-9)

    def test_symmetric_points_split_responsibilities(self):
        # two points equidistant from both means with equal weights/variances
        weights = np.array([0.5, 0.5])
        means = np.array([[-1.0], [1.0]])
        variances = np.ones((2, 1))
        X = np.array([[0.0], [0.0]])
        resp = e_step_responsibilities(weights, means, variances, X)
        assert np.allclose(resp, 0.5)

    def test_recovers_generator_parameters(self):
        rng = np.random.default_rng(42)
        n = 2000
        comp = rng.integers(0, 2, size=n)
        X = np.where(comp == 0, -2.0, 2.0)[:, None] + 0.2 * rng.standard_normal((n, 1))
        fit = em_fit(X, K=2, seed=0)
        means = np.sort(fit.means.ravel())
        assert abs(means[0] - (-2.0)) < 0.1
        assert abs(means[1] - 2.0) < 0.1
        assert np.all(np.abs(fit.weights - 0.5) < 0.05)

    def test_rejects_more_components_than_points(self):
        with pytest.raises(ValueError):
            em_fit(np.zeros((2, 1)), K=3)

    def test_log_likelihood_monotone(self):
        rng = np.random.default_rng(5)
        X = np.concatenate([
            rng.normal(-1, 0.5, size=(120, 2)), rng.normal(2, 0.8, size=(80, 2))
        ])
        fit = em_fit(X, K=3, seed=1)
        hist = np.array(fit.log_likelihood_history)
        assert np.all(np.diff(hist) >= -1e-9)

    def test_row_order_invariance(self):
        rng = np.random.default_rng(9)
        X = rng.normal(0, 1, size=(60, 2))
        fit_a = em_fit(X, K=2, seed=4)
        fit_b = em_fit(X[rng.permutation(60)], K=2, seed=4)
        assert np.allclose(np.sort(fit_a.means, axis=0), np.sort(fit_b.means, axis=0))
        assert np.allclose(np.sort(fit_a.weights), np.sort(fit_b.weights))
        assert fit_a.log_likelihood == pytest.approx(fit_b.log_likelihood, rel=1e-9)

    def test_batch_matches_single_on_separated_data(self):
        rng = np.random.default_rng(11)
        stacks = []
        for _ in range(3):
            comp = rng.integers(0, 2, size=300)
            x = np.where(comp == 0, -2.0, 2.0)[:, None] + 0.2 * rng.standard_normal((300, 1))
            stacks.append(x)
        stacked = np.stack(stacks)
        w, m, v, ll = em_fit_batch(stacked, K=2, seed=7)
        for i in range(3):
            single = em_fit(stacks[i], K=2, seed=13)
            assert np.allclose(np.sort(m[i].ravel()), np.sort(single.means.ravel()), atol=0.05)
            assert np.allclose(np.sort(w[i]), np.sort(single.weights), atol=0.03)


class TestGmmEntropy:
    def test_unit_gaussian_closed_form(self):
        fit = make_fit([1.0], [[0.0]], [[1.0]])
        assert gmm_entropy(fit, d=1) == pytest.approx(0.5 * math.log(2 * math.pi * math.e),
                                                      abs=1e-9)

    def test_two_equal_components_add_log2(self):
        # value depends only on weights and covariances, not mean separation
        for sep in (0.0, 1.0, 50.0):
            fit = make_fit([0.5, 0.5], [[-sep], [sep]], [[1.0], [1.0]])
            expected = math.log(2) + 0.5 * math.log(2 * math.pi * math.e)
            assert gmm_entropy(fit) == pytest.approx(expected, abs=1e-9)

    def test_split_component_adds_exactly_log2(self):
        base = make_fit([1.0], [[0.3]], [[0.4]])
        split = make_fit([0.5, 0.5], [[0.3], [0.3]], [[0.4], [0.4]])
        assert gmm_entropy(split) - gmm_entropy(base) == pytest.approx(math.log(2), abs=1e-12)

    def test_matches_monte_carlo_for_separated_modes(self):
        # MC entropy oracle: -E[log f] under the mixture itself
        sigma = 0.2
        fit = make_fit([0.5, 0.5], [[-2.0], [2.0]], [[sigma**2], [sigma**2]])
        rng = np.random.default_rng(3)
        n = 1_000_000
        comp = rng.integers(0, 2, size=n)
        samples = np.where(comp == 0, -2.0, 2.0) + sigma * rng.standard_normal(n)
        mc_entropy = -gmm_log_density_batch(fit, samples[:, None]).mean()
        assert abs(gmm_entropy(fit) - mc_entropy) / abs(mc_entropy) < 0.02

    def test_rejects_bad_covariance(self):
        fit = make_fit([1.0], [[0.0]], [[1.0]])
        fit.variances = np.array([[-1.0]])
        with pytest.raises(ValueError):
            gmm_entropy(fit)

    def test_dimension_cross_check(self):
        fit = make_fit([1.0], [[0.0, 0.0]], [[1.0, 1.0]])
        with pytest.raises(ValueError):
            gmm_entropy(fit, d=1)


class TestGmmLogDensity:
    def test_standard_gaussian_at_mean(self):
        fit = make_fit([1.0], [[0.0]], [[1.0]])
        assert gmm_log_density(fit, np.array([0.0])) == pytest.approx(
            -0.5 * math.log(2 * math.pi), abs=1e-9
        )

    def test_density_integrates_to_one(self):
        # quadrature oracle over a 6-sigma box
        fit = make_fit([0.3, 0.7], [[-1.0], [1.5]], [[0.5], [0.2]])
        xs = np.linspace(-1.0 - 6 * math.sqrt(0.5), 1.5 + 6 * math.sqrt(0.5), 20_001)
        dens = np.exp(gmm_log_density_batch(fit, xs[:, None]))
        integral = np.trapezoid(dens, xs)
        assert integral == pytest.approx(1.0, abs=0.01)

    def test_matches_direct_mixture_formula(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            K, d = 3, 2
            w = rng.dirichlet(np.ones(K))
            m = rng.normal(0, 2, size=(K, d))
            v = rng.uniform(0.1, 2.0, size=(K, d))
            fit = make_fit(w, m, v)
            a = rng.normal(0, 2, size=d)
            direct = sum(
                w[k] * np.prod(np.exp(-0.5 * (a - m[k]) ** 2 / v[k])
                               / np.sqrt(2 * math.pi * v[k]))
                for k in range(K)
            )
            assert math.exp(gmm_log_density(fit, a)) == pytest.approx(direct, rel=1e-12)


class FixedGaussianSampler:
    """Stands in for a policy: i.i.d. Gaussian actions, state-independent."""

    def __init__(self, mu=0.0, sigma=1.0, d=1):
        self.mu, self.sigma, self.d = mu, sigma, d

    def sample_actions(self, state, n, seed):
        rng = np.random.default_rng(seed)
        return self.mu + self.sigma * rng.standard_normal((n, self.d))


class TestEstimatePolicyEntropy:
    def test_unit_gaussian_entropy(self):
        h = estimate_policy_entropy(
            FixedGaussianSampler(), np.zeros((1, 1)), n_actions=500, K=1, seed=8
        )
        assert h == pytest.approx(0.5 * math.log(2 * math.pi * math.e), abs=0.05)

    def test_identical_states_share_estimate(self):
        sampler = FixedGaussianSampler(sigma=0.5)
        h1 = estimate_policy_entropy(sampler, np.zeros((1, 1)), 64, K=1, seed=2)
        h4 = estimate_policy_entropy(sampler, np.zeros((4, 1)), 64, K=1, seed=2)
        assert h4 == pytest.approx(h1, abs=1e-12)

    def test_near_deterministic_sampler_strongly_negative(self):
        h = estimate_policy_entropy(
            FixedGaussianSampler(sigma=1e-3), np.zeros((1, 1)), 500, K=1, seed=5
        )
        assert h == pytest.approx(0.5 * math.log(2 * math.pi * math.e * 1e-6), abs=0.1)
        assert h < -5.0

    def test_requires_enough_actions(self):
        with pytest.raises(ValueError):
            estimate_policy_entropy(FixedGaussianSampler(), np.zeros((1, 1)), 1, K=2, seed=0)


class TestAlphaController:
    def test_no_step_at_target(self):
        c = AlphaController(alpha=0.5, beta_alpha=0.1, target_entropy=-2.0)
        assert update_alpha(c, -2.0).alpha == pytest.approx(0.5)

    def test_worked_update(self):
        c = AlphaController(alpha=0.2, beta_alpha=0.01, target_entropy=-3.0)
        assert update_alpha(c, -1.0).alpha == pytest.approx(0.18)

    def test_default_target_matches_action_dim(self):
        assert default_target_entropy(3) == -3.0

    def test_clamping(self):
        c = AlphaController(alpha=0.01, beta_alpha=1.0, target_entropy=-1.0,
                            alpha_min=1e-4, alpha_max=0.5)
        assert update_alpha(c, 5.0).alpha == pytest.approx(1e-4)
        assert update_alpha(c, -10.0).alpha == pytest.approx(0.5)

    def test_rejects_nonfinite_entropy(self):
        c = AlphaController(alpha=0.1, beta_alpha=0.1, target_entropy=-1.0)
        with pytest.raises(ValueError):
            update_alpha(c, float("nan"))

    @given(
        alpha=st.floats(min_value=1e-3, max_value=5.0),
        h_hat=st.floats(min_value=-20.0, max_value=20.0),
        target=st.floats(min_value=-5.0, max_value=5.0),
    )
    @settings(max_examples=60, deadline=None)
    def test_sign_law_when_unclamped(self, alpha, h_hat, target):
        c = AlphaController(alpha=alpha, beta_alpha=0.01, target_entropy=target)
        new = update_alpha(c, h_hat)
        step_resolvable = 0.01 * abs(h_hat - target) > 1e-12 * alpha
        if c.alpha_min < new.alpha < c.alpha_max and step_resolvable:
            assert np.sign(new.alpha - alpha) == np.sign(target - h_hat)
