"""Conditional diffusion sampler over actions and its improvement objective.

Actions are generated by a reverse denoising chain conditioned on the state
and squashed into the action box with tanh, which keeps gradients alive at
the boundary. The improvement objective ascends the mean value estimate of
freshly generated actions minus a temperature-weighted surrogate log-density
term: the chain is differentiable end to end, the critic is frozen, and the
density surrogate is a per-state mixture fit treated as constant. Without
that density term, ascent on a symmetric multi-well value surface slowly
absorbs all probability into one well (the transition region between wells
costs mean value, and nothing pushes back); the term penalizes crowded modes
and keeps the sampler's spread where the temperature wants it. Exploration
adds temperature-scaled Gaussian noise on top of the sampled action and
re-clips.
"""

from __future__ import annotations

import copy
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .diffusion import DTYPE, NoiseSchedule, as_tensor, reverse_chain
from .entropy import em_fit_batch, gmm_entropy_rows
from .networks import EpsilonMlp, init_predictor_seeded
from .seeding import derive_seed, rng_from


@dataclass(frozen=True)
class ExplorationConfig:
    """Scale of the additive action noise: noise std = lam * alpha."""

    lam: float = 0.1
    enabled: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lam must be >= 0")


class PolicyModel:
    """Diffusion action sampler with target copy and box bounds."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        schedule: NoiseSchedule,
        action_low: np.ndarray,
        action_high: np.ndarray,
        hidden=(64, 64),
        activation: str = "gelu",
        seed: int = 0,
    ):
        if action_low is None or action_high is None:
            raise ValueError("action bounds are required for a bounded sampler")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.schedule = schedule
        self.action_low = np.asarray(action_low, dtype=np.float64).reshape(action_dim)
        self.action_high = np.asarray(action_high, dtype=np.float64).reshape(action_dim)
        if not (np.isfinite(self.action_low).all() and np.isfinite(self.action_high).all()):
            raise ValueError("action bounds must be finite")
        if (self.action_low >= self.action_high).any():
            raise ValueError("action_low must be below action_high")
        self._center = as_tensor((self.action_low + self.action_high) / 2.0)
        self._half = as_tensor((self.action_high - self.action_low) / 2.0)

        self.predictor = EpsilonMlp(
            sample_dim=action_dim,
            cond_dim=state_dim,
            n_steps=schedule.T,
            hidden=hidden,
            activation=activation,
        )
        init_predictor_seeded(self.predictor, derive_seed(seed, "policy-init"))
        self.target_predictor = copy.deepcopy(self.predictor)
        for p in self.target_predictor.parameters():
            p.requires_grad_(False)

    def squash(self, raw: torch.Tensor) -> torch.Tensor:
        return self._center + self._half * torch.tanh(raw)

    def _chain(
        self,
        states: torch.Tensor,
        z_T: torch.Tensor,
        eps_seq,
        use_target: bool = False,
    ) -> torch.Tensor:
        predictor = self.target_predictor if use_target else self.predictor
        raw = reverse_chain(z_T, predictor, states, self.schedule, eps_seq)
        return self.squash(raw)

    # -- numpy-facing sampling ------------------------------------------------

    def sample_actions(
        self, state: np.ndarray, n: int, seed: int, deterministic: bool = False
    ) -> np.ndarray:
        """n action draws at one state; row i uses the derived stream (seed, i).

        Keying each row by its own derived seed makes rows exchangeable and
        lets a single row be reproduced independently of n.
        """
        if n < 1:
            raise ValueError("n must be >= 1")
        state = np.asarray(state, dtype=np.float64).reshape(-1)
        if state.shape[0] != self.state_dim:
            raise ValueError(f"state dim {state.shape[0]} != {self.state_dim}")
        d, T = self.action_dim, self.schedule.T
        z_T = np.empty((n, d))
        eps = np.empty((T, n, d)) if not deterministic else None
        for i in range(n):
            rng = rng_from(seed, "action", i)
            z_T[i] = rng.standard_normal(d)
            if not deterministic:
                eps[:, i, :] = rng.standard_normal((T, d))
        states_t = as_tensor(state).unsqueeze(0).expand(n, -1)
        with torch.no_grad():
            acts = self._chain(
                states_t, as_tensor(z_T), None if eps is None else as_tensor(eps)
            )
        return acts.numpy()

    def act(self, state: np.ndarray, seed: int, deterministic: bool = False) -> np.ndarray:
        return self.sample_actions(state, 1, seed, deterministic)[0]

    def sample_batch(self, states: np.ndarray, seed: int, use_target: bool = False) -> np.ndarray:
        """One stochastic action per state row, from a single derived stream."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        B, d, T = states.shape[0], self.action_dim, self.schedule.T
        rng = rng_from(seed, "batch")
        z_T = as_tensor(rng.standard_normal((B, d)))
        eps = as_tensor(rng.standard_normal((T, B, d)))
        with torch.no_grad():
            acts = self._chain(as_tensor(states), z_T, eps, use_target=use_target)
        return acts.numpy()

    def sample_many(self, states: np.ndarray, n: int, seed: int) -> np.ndarray:
        """n stochastic actions per state row; returns (B, n, d)."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        B, d, T = states.shape[0], self.action_dim, self.schedule.T
        rng = rng_from(seed, "many")
        z_T = as_tensor(rng.standard_normal((B * n, d)))
        eps = as_tensor(rng.standard_normal((T, B * n, d)))
        states_rep = as_tensor(states).repeat_interleave(n, dim=0)
        with torch.no_grad():
            acts = self._chain(states_rep, z_T, eps)
        return acts.numpy().reshape(B, n, d)


def sample_action(
    policy: PolicyModel, state: np.ndarray, seed: int, deterministic: bool = False
) -> np.ndarray:
    """One bounded action draw; pure function of (state, seed, parameters)."""
    return policy.act(state, seed, deterministic)


def explore_action(
    policy: PolicyModel,
    state: np.ndarray,
    alpha: float,
    cfg: ExplorationConfig,
    seed: int,
) -> np.ndarray:
    """sample_action plus temperature-scaled Gaussian noise, re-clipped."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    base = policy.act(state, seed)
    scale = cfg.lam * alpha if cfg.enabled else 0.0
    if scale <= 0.0:
        return base
    noise = rng_from(seed, "explore").standard_normal(policy.action_dim)
    return np.clip(base + scale * noise, policy.action_low, policy.action_high)


@contextmanager
def frozen_params(module: torch.nn.Module):
    flags = [p.requires_grad for p in module.parameters()]
    for p in module.parameters():
        p.requires_grad_(False)
    try:
        yield
    finally:
        for p, f in zip(module.parameters(), flags):
            p.requires_grad_(f)


@dataclass
class DensityFitBatch:
    """Per-state mixture constants for the surrogate action density.

    Row i describes the fitted mixture at state i; all arrays are plain
    numbers (no gradient path), so differentiating a log-density evaluated
    under them moves only the action.
    """

    weights: np.ndarray  # (B, K)
    means: np.ndarray  # (B, K, d)
    variances: np.ndarray  # (B, K, d)

    def mean_entropy(self) -> float:
        return float(gmm_entropy_rows(self.weights, self.variances).mean())


def fit_action_density(
    policy: PolicyModel,
    states: np.ndarray,
    n_actions: int,
    components: int,
    seed: int,
    em_max_iters: int = 30,
    em_tol: float = 1e-6,
) -> DensityFitBatch:
    """Fit the per-state mixture surrogate to fresh policy samples."""
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    acts = policy.sample_many(states, n_actions, seed)
    weights, means, variances, _ = em_fit_batch(
        acts, components, max_iters=em_max_iters, tol=em_tol, seed=derive_seed(seed, "fit")
    )
    return DensityFitBatch(weights=weights, means=means, variances=variances)


def mixture_log_prob_torch(fit: DensityFitBatch, actions: torch.Tensor) -> torch.Tensor:
    """log f_hat(a) per row, differentiable in the actions only."""
    d = actions.shape[1]
    means = as_tensor(fit.means)
    variances = as_tensor(fit.variances)
    logw = torch.log(torch.clamp(as_tensor(fit.weights), min=1e-12))
    diff = actions.unsqueeze(1) - means  # (B, K, d)
    maha = (diff**2 / variances).sum(dim=2)
    logdet = torch.log(variances).sum(dim=2)
    log_pdf = -0.5 * (d * math.log(2 * math.pi) + logdet + maha)
    return torch.logsumexp(logw + log_pdf, dim=1)


def policy_loss(
    policy: PolicyModel,
    dvn,
    states: np.ndarray,
    alpha: float,
    n_q_samples: int,
    generator: torch.Generator,
    density_fit: Optional[DensityFitBatch] = None,
) -> torch.Tensor:
    """Soft improvement objective over a state batch (to be ascended).

    Per state: generate an action through the fully differentiable reverse
    chain, estimate its value as the mean of n_q_samples frozen-critic return
    draws, and subtract alpha times the surrogate log-density of the action
    when a density fit is supplied. The critic parameters receive no
    gradient; the density fit is constant, so its term pushes actions out of
    over-crowded modes, which is what keeps symmetric optima populated.
    """
    if n_q_samples < 1:
        raise ValueError("n_q_samples must be >= 1")
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    states_t = as_tensor(np.atleast_2d(np.asarray(states, dtype=np.float64)))
    B, d, T = states_t.shape[0], policy.action_dim, policy.schedule.T
    z_T = torch.randn((B, d), generator=generator, dtype=DTYPE)
    eps_seq = torch.randn((T, B, d), generator=generator, dtype=DTYPE)
    actions = policy._chain(states_t, z_T, eps_seq)
    cond = torch.cat([states_t, actions], dim=1)
    with frozen_params(dvn.predictor):
        q_draws = dvn.sample_torch(cond, n_q_samples, generator)
    objective = q_draws.mean(dim=1)
    if alpha > 0 and density_fit is not None:
        objective = objective - alpha * mixture_log_prob_torch(density_fit, actions)
    return objective.mean()
