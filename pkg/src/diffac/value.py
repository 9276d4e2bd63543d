"""Diffusion sampler over scalar returns, its Bellman targets and bias probe.

The value model represents the conditional return distribution implicitly:
a noise-prediction network conditioned on (state, action) drives a reverse
chain whose outputs are return draws. Training regresses the network onto
bootstrapped distributional targets r + gamma * (z' - alpha * log pi(a'|s')),
one target draw per transition so the target's full spread survives.
Returns are standardized by a running normalizer before entering the chain
and de-standardized on the way out.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .buffer import TransitionBatch
from .diffusion import (
    DTYPE,
    DiffusionSampleRequest,
    NoiseSchedule,
    as_tensor,
    reverse_chain,
    reverse_sample,
    simple_denoising_loss,
)
from .entropy import em_fit_batch, gmm_entropy_rows, gmm_log_density_rows
from .networks import EpsilonMlp
from .seeding import derive_seed, rng_from


class ReturnNormalizer:
    """Running mean/std used to keep diffusion targets near unit scale."""

    def __init__(self, min_std: float = 1e-3):
        self.count = 0.0
        self.mean = 0.0
        self.m2 = 0.0
        self.min_std = min_std

    def update(self, values: np.ndarray) -> None:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.size == 0:
            return
        b_count = float(values.size)
        b_mean = float(values.mean())
        b_m2 = float(((values - b_mean) ** 2).sum())
        delta = b_mean - self.mean
        total = self.count + b_count
        self.mean += delta * b_count / total
        self.m2 += b_m2 + delta**2 * self.count * b_count / total
        self.count = total

    @property
    def std(self) -> float:
        if self.count < 2:
            return 1.0
        return max(math.sqrt(self.m2 / self.count), self.min_std)

    def normalize(self, x):
        return (x - self.mean) / self.std

    def denormalize(self, z):
        return z * self.std + self.mean

    def state_dict(self) -> dict:
        return {"count": self.count, "mean": self.mean, "m2": self.m2,
                "min_std": self.min_std}

    def load_state_dict(self, d: dict) -> None:
        self.count = d["count"]
        self.mean = d["mean"]
        self.m2 = d["m2"]
        self.min_std = d["min_std"]


class ReturnDistributionModel:
    """Conditional diffusion model over scalar returns with a target copy."""

    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        schedule: NoiseSchedule,
        hidden=(64, 64),
        activation: str = "gelu",
        seed: int = 0,
    ):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.schedule = schedule
        self.predictor = EpsilonMlp(
            sample_dim=1,
            cond_dim=state_dim + action_dim,
            n_steps=schedule.T,
            hidden=hidden,
            activation=activation,
        )
        from .networks import init_predictor_seeded

        init_predictor_seeded(self.predictor, derive_seed(seed, "dvn-init"))
        self.target_predictor = copy.deepcopy(self.predictor)
        for p in self.target_predictor.parameters():
            p.requires_grad_(False)
        self.normalizer = ReturnNormalizer()

    def _conditioning(self, states: np.ndarray, actions: np.ndarray) -> torch.Tensor:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if states.shape[1] != self.state_dim or actions.shape[1] != self.action_dim:
            raise ValueError(
                f"conditioning dims (s={states.shape[1]}, a={actions.shape[1]}) do not "
                f"match model (s={self.state_dim}, a={self.action_dim})"
            )
        return as_tensor(np.concatenate([states, actions], axis=1))

    def sample_matrix(
        self,
        states: np.ndarray,
        actions: np.ndarray,
        n: int,
        seed: int,
        use_target: bool = False,
    ) -> np.ndarray:
        """n return draws for each (state, action) row; returns (rows, n)."""
        cond = self._conditioning(states, actions)
        rows = cond.shape[0]
        cond_rep = cond.repeat_interleave(n, dim=0)
        predictor = self.target_predictor if use_target else self.predictor
        request = DiffusionSampleRequest(
            n_samples=rows * n, sample_dim=1, conditioning=cond_rep,
            stochastic=True, rng_seed=derive_seed(seed, "returns"),
        )
        with torch.no_grad():
            z0 = reverse_sample(request, predictor, self.schedule)
        vals = self.normalizer.denormalize(z0.numpy().reshape(rows, n))
        return vals

    def sample_torch(
        self,
        cond: torch.Tensor,
        n_per: int,
        generator: torch.Generator,
        use_target: bool = False,
    ) -> torch.Tensor:
        """Differentiable return draws; gradient flows into the conditioning.

        cond is (B, state_dim + action_dim); returns (B, n_per) de-normalized
        draws with the reverse chain kept on the autograd tape.
        """
        B = cond.shape[0]
        cond_rep = cond.repeat_interleave(n_per, dim=0)
        predictor = self.target_predictor if use_target else self.predictor
        z_T = torch.randn((B * n_per, 1), generator=generator, dtype=DTYPE)
        eps_seq = torch.randn((self.schedule.T, B * n_per, 1), generator=generator, dtype=DTYPE)
        z0 = reverse_chain(z_T, predictor, cond_rep, self.schedule, eps_seq)
        return z0.reshape(B, n_per) * self.normalizer.std + self.normalizer.mean


def sample_returns(
    model: ReturnDistributionModel,
    state: np.ndarray,
    action: np.ndarray,
    n: int,
    seed: int,
    use_target: bool = False,
) -> np.ndarray:
    """n independent return draws at one (state, action); their mean is Q-hat."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return model.sample_matrix(
        np.asarray(state)[None, :], np.asarray(action)[None, :], n, seed, use_target
    )[0]


@dataclass
class BellmanTargetBatch:
    """Per-transition scalar targets, frozen at construction time."""

    values: np.ndarray  # (B,)
    gamma: float
    alpha: float

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise ValueError("targets must be finite")


def build_bellman_targets(
    transitions: TransitionBatch,
    target_model,
    policy,
    alpha: float,
    gamma: float,
    seed: int,
    entropy_correction: str = "gmm_logpi",
    n_density_actions: int = 16,
    gmm_components: int = 2,
    em_max_iters: int = 30,
    em_tol: float = 1e-6,
) -> BellmanTargetBatch:
    """Distributional targets r + gamma * (z' - alpha * log pi_hat(a'|s')).

    a' is drawn from the policy at the next state and z' is a single draw
    from the target return model, so each transition contributes one sample
    of the bootstrapped distribution. The policy has no closed-form density,
    so log pi_hat comes from a per-state mixture fit to sampled actions;
    entropy_correction="gmm_entropy" swaps the pointwise log-density for its
    state expectation (the fitted entropy), and "none" drops the correction.
    Terminal transitions contribute exactly r.
    """
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must lie in [0, 1)")
    if alpha < 0.0:
        raise ValueError("alpha must be >= 0")
    if entropy_correction not in ("gmm_logpi", "gmm_entropy", "none"):
        raise ValueError(f"unknown entropy_correction {entropy_correction!r}")
    if len(transitions) == 0:
        raise ValueError("empty transition batch")

    targets = transitions.rewards.astype(np.float64).copy()
    live = ~transitions.terminals
    if gamma > 0.0 and live.any():
        s_next = transitions.next_states[live]
        a_next = policy.sample_batch(s_next, derive_seed(seed, "next-action"))
        z_next = target_model.sample_matrix(
            s_next, a_next, 1, derive_seed(seed, "next-return"), use_target=True
        )[:, 0]
        correction = np.zeros(len(s_next))
        if alpha > 0.0 and entropy_correction != "none":
            acts = policy.sample_many(s_next, n_density_actions, derive_seed(seed, "density"))
            weights, means, variances, _ = em_fit_batch(
                acts, gmm_components, max_iters=em_max_iters, tol=em_tol,
                seed=derive_seed(seed, "density-em"),
            )
            if entropy_correction == "gmm_logpi":
                correction = -alpha * gmm_log_density_rows(weights, means, variances, a_next)
            else:
                correction = alpha * gmm_entropy_rows(weights, variances)
        targets[live] = transitions.rewards[live] + gamma * (z_next + correction)
    return BellmanTargetBatch(values=targets, gamma=gamma, alpha=alpha)


def dvn_loss(
    model: ReturnDistributionModel,
    targets: BellmanTargetBatch,
    transitions: TransitionBatch,
    generator: torch.Generator,
    ts: Optional[torch.Tensor] = None,
    eps: Optional[torch.Tensor] = None,
) -> torch.Tensor:
    """Denoising loss of the return model against frozen normalized targets."""
    if len(transitions) != targets.values.shape[0]:
        raise ValueError("targets and transitions are misaligned")
    cond = model._conditioning(transitions.states, transitions.actions)
    x0 = as_tensor(model.normalizer.normalize(targets.values)).unsqueeze(1)
    return simple_denoising_loss(
        x0, model.predictor, cond, model.schedule, generator, ts=ts, eps=eps
    )


@dataclass
class BiasReport:
    """Outcome of comparing model Q estimates against rollout truth."""

    n_pairs: int
    mean_bias: float
    relative_bias: float
    mean_q_estimate: float
    mean_q_true: float


def evaluate_bias(
    model,
    env,
    policy,
    gamma: float,
    n_episodes: int,
    horizon: int,
    alpha: float = 0.0,
    n_value_samples: int = 64,
    seed: int = 0,
    truncation_tol: float = 1e-3,
    entropy_n_actions: int = 32,
    entropy_components: int = 2,
) -> BiasReport:
    """Mean and relative value-estimation bias over on-policy rollouts.

    Ground truth for each visited (state, action) is the discounted
    accumulation of the rewards actually sampled along the rollout, plus
    discounted entropy bonuses -alpha * log pi_hat for the actions taken
    after the first step when alpha > 0. The model estimate is the mean of
    n_value_samples return draws. relative_bias is the mean of the per-pair
    ratios (estimate - truth) / |truth|.
    """
    spec = env.spec()
    r_max = max(abs(spec.reward_range[0]), abs(spec.reward_range[1]))
    if horizon < spec.max_episode_len and gamma**horizon * r_max > truncation_tol:
        raise ValueError(
            f"horizon {horizon} leaves truncation error "
            f"{gamma**horizon * r_max:.3g} above tolerance {truncation_tol}"
        )
    if n_episodes == 0:
        return BiasReport(0, math.nan, math.nan, math.nan, math.nan)

    # Rollout truth is only trustworthy for pairs whose remaining steps push
    # the discounted tail below tolerance; pairs from naturally terminated
    # episodes are always exact.
    if gamma == 0.0:
        min_remaining = 1
    else:
        min_remaining = max(1, math.ceil(math.log(truncation_tol / max(r_max, 1e-12))
                                         / math.log(gamma)))

    visited_s, visited_a, q_true = [], [], []
    for ep in range(n_episodes):
        state = env.reset(derive_seed(seed, "bias-env", ep))
        states, actions, rewards, bonuses = [], [], [], []
        ended_naturally = False
        for t in range(horizon):
            a = policy.act(state, derive_seed(seed, "bias-act", ep, t))
            next_state, r, terminal, truncated = env.step(a)
            states.append(state)
            actions.append(a)
            rewards.append(r)
            if alpha > 0.0 and t > 0:
                acts = policy.sample_many(
                    state[None, :], entropy_n_actions, derive_seed(seed, "bias-dens", ep, t)
                )
                w, m, v, _ = em_fit_batch(
                    acts, entropy_components, seed=derive_seed(seed, "bias-em", ep, t)
                )
                bonuses.append(-alpha * float(gmm_log_density_rows(w, m, v, a[None, :])[0]))
            else:
                bonuses.append(0.0)
            state = next_state
            if terminal:
                ended_naturally = True
                break
            if truncated:
                break
        n_steps = len(rewards)
        g = 0.0
        for t in reversed(range(n_steps)):
            g = rewards[t] + bonuses[t] + gamma * g
            if not ended_naturally and n_steps - t < min_remaining:
                continue
            visited_s.append(states[t])
            visited_a.append(actions[t])
            # bonus at step t belongs to the return of step t-1 onward
            q_true.append(g - bonuses[t])

    if not q_true:
        return BiasReport(0, math.nan, math.nan, math.nan, math.nan)
    states_arr = np.array(visited_s)
    actions_arr = np.array(visited_a)
    q_true_arr = np.array(q_true)
    draws = model.sample_matrix(
        states_arr, actions_arr, n_value_samples, derive_seed(seed, "bias-q")
    )
    q_hat = draws.mean(axis=1)
    diff = q_hat - q_true_arr
    denom = np.abs(q_true_arr)
    if (denom < 1e-9).any():
        rel = float(diff.mean() / max(denom.mean(), 1e-9))
    else:
        rel = float((diff / denom).mean())
    return BiasReport(
        n_pairs=len(q_true_arr),
        mean_bias=float(diff.mean()),
        relative_bias=rel,
        mean_q_estimate=float(q_hat.mean()),
        mean_q_true=float(q_true_arr.mean()),
    )
