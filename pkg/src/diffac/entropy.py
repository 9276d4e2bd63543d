"""Mixture-based entropy machinery for the action sampler.

The action sampler has no closed-form density, so its per-state distribution
is summarized by fitting a diagonal Gaussian mixture to sampled actions with
EM. The fitted mixture supplies three things: a surrogate log-density, a
cheap entropy estimate (weight term plus weighted per-component Gaussian
entropies), and the signal that drives the temperature controller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from .seeding import derive_seed, rng_from

VAR_FLOOR = 1e-6
_WEIGHT_FLOOR = 1e-8


@dataclass
class GmmFit:
    """A fitted diagonal-covariance Gaussian mixture."""

    weights: np.ndarray  # (K,)
    means: np.ndarray  # (K, d)
    variances: np.ndarray  # (K, d) diagonal entries
    log_likelihood: float
    n_iters: int
    converged: bool
    log_likelihood_history: list = None

    @property
    def K(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def covariances(self) -> np.ndarray:
        """Full (K, d, d) covariance matrices built from the diagonals."""
        K, d = self.means.shape
        out = np.zeros((K, d, d))
        for k in range(K):
            np.fill_diagonal(out[k], self.variances[k])
        return out

    def validate(self) -> None:
        if not np.isclose(self.weights.sum(), 1.0, atol=1e-9):
            raise ValueError("mixture weights must sum to 1")
        if (self.weights < 0).any():
            raise ValueError("mixture weights must be nonnegative")
        if (self.variances < VAR_FLOOR * (1 - 1e-12)).any():
            raise ValueError("covariance diagonal below positive-definite floor")


def _component_log_pdf(X: np.ndarray, means: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Log N(x_i | mu_k, diag(var_k)) for all (i, k); returns (N, K)."""
    d = X.shape[1]
    diff = X[:, None, :] - means[None, :, :]  # (N, K, d)
    maha = (diff**2 / variances[None, :, :]).sum(axis=2)
    logdet = np.log(variances).sum(axis=1)  # (K,)
    return -0.5 * (d * math.log(2 * math.pi) + logdet[None, :] + maha)


def _kmeans_pp_init(X: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ style seeding of component means from the data rows."""
    N = X.shape[0]
    centers = [X[rng.integers(N)]]
    for _ in range(1, K):
        d2 = np.min(
            [((X - c) ** 2).sum(axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(X[rng.integers(N)])
            continue
        centers.append(X[rng.choice(N, p=d2 / total)])
    return np.array(centers)


def e_step_responsibilities(
    weights: np.ndarray, means: np.ndarray, variances: np.ndarray, X: np.ndarray
) -> np.ndarray:
    """Posterior component memberships for each data row; returns (N, K)."""
    log_joint = np.log(np.maximum(weights, _WEIGHT_FLOOR))[None, :] + _component_log_pdf(
        np.asarray(X, dtype=np.float64), means, variances
    )
    return np.exp(log_joint - logsumexp(log_joint, axis=1)[:, None])


def em_fit(
    actions: np.ndarray,
    K: int,
    max_iters: int = 50,
    tol: float = 1e-6,
    seed: int = 0,
) -> GmmFit:
    """Fit a K-component diagonal GMM to an (N, d) action matrix with EM.

    Initialization seeds k-means++ from a canonical (lexicographically
    sorted) view of the rows so the result is invariant to row order.
    Components whose weight collapses are re-seeded from a random data point.
    """
    X = np.asarray(actions, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("actions must be an (N, d) matrix")
    N, d = X.shape
    if not 1 <= K <= N:
        raise ValueError(f"need N >= K >= 1, got N={N}, K={K}")

    order = np.lexsort(X.T[::-1])
    X_sorted = X[order]
    rng = rng_from(seed, "em-init")
    means = _kmeans_pp_init(X_sorted, K, rng)
    global_var = np.maximum(X.var(axis=0), VAR_FLOOR)
    variances = np.tile(global_var, (K, 1))
    weights = np.full(K, 1.0 / K)

    log_lik_prev = -np.inf
    history: list = []
    n_iters = 0
    converged = False
    for n_iters in range(1, max_iters + 1):
        # E-step: responsibilities in log space.
        log_joint = np.log(np.maximum(weights, _WEIGHT_FLOOR))[None, :] + _component_log_pdf(
            X, means, variances
        )
        log_norm = logsumexp(log_joint, axis=1)
        log_lik = float(log_norm.sum())
        history.append(log_lik)
        if np.isfinite(log_lik_prev) and log_lik - log_lik_prev < tol:
            converged = True
            break
        resp = np.exp(log_joint - log_norm[:, None])  # (N, K)

        # M-step: responsibility-weighted moments.
        nk = resp.sum(axis=0)  # (K,)
        weights = nk / N
        degenerate = weights < _WEIGHT_FLOOR
        safe_nk = np.maximum(nk, _WEIGHT_FLOOR)
        means = (resp.T @ X) / safe_nk[:, None]
        sq = resp.T @ (X**2) / safe_nk[:, None]
        variances = np.maximum(sq - means**2, VAR_FLOOR)

        if degenerate.any():
            for k in np.flatnonzero(degenerate):
                means[k] = X_sorted[rng.integers(N)]
                variances[k] = global_var
                weights[k] = 1.0 / N
            weights = weights / weights.sum()
            log_lik_prev = -np.inf  # restart the improvement track
            continue

        log_lik_prev = log_lik

    fit = GmmFit(
        weights=weights,
        means=means,
        variances=variances,
        log_likelihood=history[-1],
        n_iters=n_iters,
        converged=converged,
        log_likelihood_history=history,
    )
    fit.validate()
    return fit


def gmm_entropy(fit: GmmFit, d: Optional[int] = None) -> float:
    """Mixture entropy surrogate: weight entropy plus weighted Gaussian entropies.

    Computes -sum_k w_k log w_k + sum_k w_k * 0.5 * log((2 pi e)^d |Sigma_k|).
    This treats components as non-overlapping, so it upper-bounds the exact
    mixture entropy; the bound is tight for well-separated components.
    """
    if d is None:
        d = fit.dim
    elif d != fit.dim:
        raise ValueError(f"d={d} does not match fitted dimension {fit.dim}")
    if (fit.variances <= 0).any():
        raise ValueError("covariances must be positive definite")
    w = np.maximum(fit.weights, _WEIGHT_FLOOR)
    weight_term = -float(np.sum(fit.weights * np.log(w)))
    logdet = np.log(fit.variances).sum(axis=1)
    gauss_term = float(np.sum(fit.weights * 0.5 * (d * math.log(2 * math.pi * math.e) + logdet)))
    return weight_term + gauss_term


def gmm_log_density(fit: GmmFit, a: np.ndarray) -> float:
    """Log of the mixture density at a single action, via log-sum-exp."""
    a = np.asarray(a, dtype=np.float64).reshape(1, -1)
    if a.shape[1] != fit.dim:
        raise ValueError("action dimension does not match the fit")
    log_joint = np.log(np.maximum(fit.weights, _WEIGHT_FLOOR)) + _component_log_pdf(
        a, fit.means, fit.variances
    )[0]
    return float(logsumexp(log_joint))


def gmm_log_density_batch(fit: GmmFit, A: np.ndarray) -> np.ndarray:
    """Vectorized gmm_log_density over an (N, d) matrix."""
    A = np.asarray(A, dtype=np.float64)
    log_joint = np.log(np.maximum(fit.weights, _WEIGHT_FLOOR))[None, :] + _component_log_pdf(
        A, fit.means, fit.variances
    )
    return logsumexp(log_joint, axis=1)


def estimate_policy_entropy(
    policy,
    states: np.ndarray,
    n_actions: int,
    K: int,
    seed: int,
    noise_scale: float = 0.0,
    max_iters: int = 50,
    tol: float = 1e-6,
) -> float:
    """Mean GMM entropy of the sampler's action distribution over a state batch.

    Each state gets n_actions samples from the policy (same seed for every
    state, so duplicate states produce identical estimates), an EM fit and an
    entropy readout. noise_scale > 0 adds isotropic Gaussian noise to the
    sampled actions before fitting, which measures the behavior policy
    (sampler plus exploration noise) instead of the bare sampler.
    """
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if n_actions < K:
        raise ValueError("need n_actions >= K for the mixture fit")
    entropies = []
    for state in states:
        acts = policy.sample_actions(state, n_actions, seed)
        if noise_scale > 0:
            rng = rng_from(seed, "entropy-noise")
            acts = acts + noise_scale * rng.standard_normal(acts.shape)
        fit = em_fit(acts, K, max_iters=max_iters, tol=tol, seed=derive_seed(seed, "em"))
        entropies.append(gmm_entropy(fit))
    return float(np.mean(entropies))


def em_fit_batch(
    actions: np.ndarray,
    K: int,
    max_iters: int = 50,
    tol: float = 1e-6,
    seed: int = 0,
) -> tuple:
    """Vectorized EM over a stack of sample sets.

    actions has shape (S, N, d): S independent mixtures are fitted at once,
    all iterations running as broadcast array ops. Used on the training hot
    path where per-state em_fit calls would dominate; collapsed components
    are floored rather than re-seeded. Returns (weights (S, K),
    means (S, K, d), variances (S, K, d), log_liks (S,)).
    """
    X = np.asarray(actions, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError("actions must be (S, N, d)")
    S, N, d = X.shape
    if not 1 <= K <= N:
        raise ValueError(f"need N >= K >= 1, got N={N}, K={K}")

    rng = rng_from(seed, "em-batch-init")
    means = np.empty((S, K, d))
    for s_i in range(S):
        means[s_i] = _kmeans_pp_init(X[s_i], K, rng)
    variances = np.maximum(X.var(axis=1), VAR_FLOOR)[:, None, :].repeat(K, axis=1)
    weights = np.full((S, K), 1.0 / K)

    log_liks = np.full(S, -np.inf)
    for _ in range(max_iters):
        diff = X[:, :, None, :] - means[:, None, :, :]  # (S, N, K, d)
        maha = (diff**2 / variances[:, None, :, :]).sum(axis=3)
        logdet = np.log(variances).sum(axis=2)  # (S, K)
        log_pdf = -0.5 * (d * math.log(2 * math.pi) + logdet[:, None, :] + maha)
        log_joint = np.log(np.maximum(weights, _WEIGHT_FLOOR))[:, None, :] + log_pdf
        log_norm = logsumexp(log_joint, axis=2)  # (S, N)
        new_liks = log_norm.sum(axis=1)
        if np.all(np.abs(new_liks - log_liks) < tol):
            log_liks = new_liks
            break
        log_liks = new_liks
        resp = np.exp(log_joint - log_norm[:, :, None])  # (S, N, K)

        nk = np.maximum(resp.sum(axis=1), _WEIGHT_FLOOR)  # (S, K)
        weights = nk / N
        weights = np.maximum(weights, _WEIGHT_FLOOR)
        weights = weights / weights.sum(axis=1, keepdims=True)
        means = np.einsum("snk,snd->skd", resp, X) / nk[:, :, None]
        sq = np.einsum("snk,snd->skd", resp, X**2) / nk[:, :, None]
        variances = np.maximum(sq - means**2, VAR_FLOOR)

    return weights, means, variances, log_liks


def gmm_log_density_rows(
    weights: np.ndarray, means: np.ndarray, variances: np.ndarray, A: np.ndarray
) -> np.ndarray:
    """Per-row mixture log density for stacked fits.

    weights (S, K), means/variances (S, K, d), A (S, d): row i is evaluated
    under fit i.
    """
    d = A.shape[1]
    diff = A[:, None, :] - means  # (S, K, d)
    maha = (diff**2 / variances).sum(axis=2)
    logdet = np.log(variances).sum(axis=2)
    log_pdf = -0.5 * (d * math.log(2 * math.pi) + logdet + maha)
    return logsumexp(np.log(np.maximum(weights, _WEIGHT_FLOOR)) + log_pdf, axis=1)


def gmm_entropy_rows(weights: np.ndarray, variances: np.ndarray) -> np.ndarray:
    """Mixture entropy surrogate per stacked fit; weights (S, K), variances (S, K, d)."""
    d = variances.shape[2]
    w = np.maximum(weights, _WEIGHT_FLOOR)
    weight_term = -(weights * np.log(w)).sum(axis=1)
    logdet = np.log(variances).sum(axis=2)
    gauss_term = (weights * 0.5 * (d * math.log(2 * math.pi * math.e) + logdet)).sum(axis=1)
    return weight_term + gauss_term


@dataclass(frozen=True)
class AlphaController:
    """Adaptive temperature state: alpha chases a target entropy."""

    alpha: float
    beta_alpha: float
    target_entropy: float
    alpha_min: float = 1e-6
    alpha_max: float = 10.0

    def __post_init__(self):
        if self.alpha_min <= 0:
            raise ValueError("alpha_min must be positive")
        if self.alpha_min > self.alpha_max:
            raise ValueError("alpha_min must not exceed alpha_max")
        if not self.alpha_min <= self.alpha <= self.alpha_max:
            raise ValueError("alpha outside its clamp range")


def default_target_entropy(action_dim: int) -> float:
    """Conventional target: minus the action dimension."""
    return -float(action_dim)


def update_alpha(controller: AlphaController, h_hat: float) -> AlphaController:
    """One temperature step: alpha <- alpha - beta_alpha (H_hat - H_target).

    The result is clamped into [alpha_min, alpha_max]; alpha falls when the
    measured entropy exceeds the target and rises when it is below.
    """
    if not np.isfinite(h_hat):
        raise ValueError("entropy estimate must be finite")
    raw = controller.alpha - controller.beta_alpha * (h_hat - controller.target_entropy)
    clamped = min(max(raw, controller.alpha_min), controller.alpha_max)
    return replace(controller, alpha=clamped)
