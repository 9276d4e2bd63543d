"""End-to-end training runtime: sampling, interleaved updates, persistence.

One iteration collects transitions from a pool of environment instances
under the exploration policy, then runs gradient updates: the value network
steps every update, while the policy, temperature and both target networks
move only on the delayed-update schedule. All randomness is derived from
the master seed plus counters, so runs are bit-reproducible and checkpoints
resume exactly.
"""

from __future__ import annotations

import math
import time
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
import torch
from torch import nn

from .buffer import ReplayBuffer, Transition
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .diffusion import make_schedule
from .entropy import (
    AlphaController,
    default_target_entropy,
    em_fit_batch,
    gmm_entropy_rows,
    update_alpha,
)
from .envs import make_env
from .policy import (
    ExplorationConfig,
    PolicyModel,
    explore_action,
    fit_action_density,
    policy_loss,
)
from .seeding import derive_seed, rng_from
from .value import ReturnDistributionModel, build_bellman_targets, dvn_loss

CHECKPOINT_PAYLOAD_VERSION = 1


class TrainingDiverged(RuntimeError):
    """A loss went non-finite; carries the diagnostic snapshot path if any."""

    def __init__(self, message: str, snapshot_path: Optional[Path] = None):
        super().__init__(message)
        self.snapshot_path = snapshot_path


def soft_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, elementwise and exact."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    t_params = dict(target.named_parameters())
    o_params = dict(online.named_parameters())
    if t_params.keys() != o_params.keys():
        raise ValueError("parameter sets differ between target and online networks")
    with torch.no_grad():
        for name, tp in t_params.items():
            op = o_params[name]
            if tp.shape != op.shape:
                raise ValueError(f"shape mismatch for {name}: {tp.shape} vs {op.shape}")
            tp.mul_(1.0 - tau).add_(op, alpha=tau)


@dataclass
class EpisodeStats:
    returns: List[float]
    lengths: List[int]


class SamplerPool:
    """A set of environment instances stepped round-robin.

    Each instance owns derived seed streams keyed by (environment index,
    episode counter), so collection order never depends on wall time and a
    restored pool continues exactly where it left off.
    """

    def __init__(self, env_factory, n_samplers: int, master_seed: int):
        if n_samplers < 1:
            raise ValueError("need at least one sampler")
        self.envs = [env_factory() for _ in range(n_samplers)]
        self.master_seed = master_seed
        n = n_samplers
        self.needs_reset = [True] * n
        self.states = [None] * n
        self.episode_counters = [0] * n
        self.steps_in_episode = [0] * n
        self.episode_returns = [0.0] * n

    def collect(
        self,
        policy: PolicyModel,
        alpha: float,
        exploration: ExplorationConfig,
        n_steps: int,
        buffer: ReplayBuffer,
    ) -> EpisodeStats:
        """Advance every sampler n_steps, appending transitions to the buffer."""
        stats = EpisodeStats(returns=[], lengths=[])
        for _ in range(n_steps):
            for i, env in enumerate(self.envs):
                if self.needs_reset[i]:
                    seed = derive_seed(self.master_seed, "episode", i, self.episode_counters[i])
                    self.states[i] = env.reset(seed)
                    self.needs_reset[i] = False
                    self.steps_in_episode[i] = 0
                    self.episode_returns[i] = 0.0
                act_seed = derive_seed(
                    self.master_seed, "explore", i,
                    self.episode_counters[i], self.steps_in_episode[i],
                )
                action = explore_action(policy, self.states[i], alpha, exploration, act_seed)
                next_state, reward, terminal, truncated = env.step(action)
                buffer.add(Transition(
                    state=np.asarray(self.states[i], dtype=np.float64),
                    action=np.asarray(action, dtype=np.float64),
                    reward=reward,
                    next_state=np.asarray(next_state, dtype=np.float64),
                    terminal=terminal,
                ))
                self.episode_returns[i] += reward
                self.steps_in_episode[i] += 1
                if terminal or truncated:
                    stats.returns.append(self.episode_returns[i])
                    stats.lengths.append(self.steps_in_episode[i])
                    self.episode_counters[i] += 1
                    self.needs_reset[i] = True
                else:
                    self.states[i] = next_state
        return stats

    def state_dict(self) -> dict:
        return {
            "needs_reset": list(self.needs_reset),
            "states": [None if s is None else np.asarray(s) for s in self.states],
            "episode_counters": list(self.episode_counters),
            "steps_in_episode": list(self.steps_in_episode),
            "episode_returns": list(self.episode_returns),
        }

    def load_state_dict(self, d: dict) -> None:
        self.needs_reset = list(d["needs_reset"])
        self.states = [None if s is None else np.asarray(s) for s in d["states"]]
        self.episode_counters = list(d["episode_counters"])
        self.steps_in_episode = list(d["steps_in_episode"])
        self.episode_returns = list(d["episode_returns"])
        for i, env in enumerate(self.envs):
            if not self.needs_reset[i] and self.states[i] is not None:
                # Mid-episode resume: push the kinematic state back into the env.
                if hasattr(env, "_state"):
                    env._state = np.asarray(self.states[i], dtype=np.float64).copy()
                if hasattr(env, "_steps"):
                    env._steps = self.steps_in_episode[i]


class Trainer:
    """Owns the models, buffer, sampler pool and update schedule."""

    def __init__(self, config: RunConfig, out_dir: Optional[Path] = None):
        self.config = config
        self.out_dir = Path(out_dir) if out_dir is not None else None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
        self.master_seed = config.seed

        self._env_factory = lambda: make_env(config.env.name, config.env.overrides)
        probe = self._env_factory()
        self.env_spec = probe.spec()
        s_dim, a_dim = self.env_spec.state_dim, self.env_spec.action_dim

        vsched = make_schedule(
            config.value.schedule.steps, config.value.schedule.beta_min,
            config.value.schedule.beta_max, config.value.schedule.shape,
        )
        psched = make_schedule(
            config.policy.schedule.steps, config.policy.schedule.beta_min,
            config.policy.schedule.beta_max, config.policy.schedule.shape,
        )
        self.dvn = ReturnDistributionModel(
            s_dim, a_dim, vsched,
            hidden=tuple(config.value.network.hidden),
            activation=config.value.network.activation,
            seed=derive_seed(config.seed, "dvn"),
        )
        self.policy = PolicyModel(
            s_dim, a_dim, psched,
            action_low=self.env_spec.action_low,
            action_high=self.env_spec.action_high,
            hidden=tuple(config.policy.network.hidden),
            activation=config.policy.network.activation,
            seed=derive_seed(config.seed, "policy"),
        )
        target_h = config.entropy.target_entropy
        if target_h is None:
            target_h = default_target_entropy(a_dim)
        self.alpha_controller = AlphaController(
            alpha=config.entropy.alpha_init,
            beta_alpha=config.entropy.beta_alpha,
            target_entropy=target_h,
            alpha_min=config.entropy.alpha_min,
            alpha_max=config.entropy.alpha_max,
        )
        self.exploration = ExplorationConfig(
            lam=config.exploration.lam, enabled=config.exploration.enabled
        )
        self.buffer = ReplayBuffer(config.trainer.buffer_capacity, s_dim, a_dim)
        self.pool = SamplerPool(self._env_factory, config.trainer.n_samplers, config.seed)

        self.opt_value = torch.optim.Adam(
            self.dvn.predictor.parameters(), lr=config.trainer.beta_z
        )
        self.opt_policy = torch.optim.Adam(
            self.policy.predictor.parameters(), lr=config.trainer.beta_pi
        )

        self.iteration = 0
        self.update_k = 0
        self.episode_window = deque(maxlen=50)
        self._last = {"j_z": None, "j_pi": None, "h_hat": None, "q_mean": None}

    @property
    def alpha(self) -> float:
        return self.alpha_controller.alpha

    def _torch_gen(self, *path) -> torch.Generator:
        return torch.Generator().manual_seed(derive_seed(self.master_seed, *path) % (2**63))

    def _estimate_entropy_behavior(self, states: np.ndarray, k: int) -> float:
        """Entropy of the exploration policy (sampler plus lam*alpha noise)."""
        cfg = self.config.entropy
        n_states = min(cfg.batch_states, states.shape[0])
        idx = rng_from(self.master_seed, "ent-states", k).choice(
            states.shape[0], size=n_states, replace=False
        )
        sub = states[idx]
        acts = self.policy.sample_many(sub, cfg.n_actions, derive_seed(self.master_seed, "ent", k))
        scale = self.exploration.lam * self.alpha if self.exploration.enabled else 0.0
        if scale > 0:
            noise = rng_from(self.master_seed, "ent-noise", k).standard_normal(acts.shape)
            acts = acts + scale * noise
        weights, _, variances, _ = em_fit_batch(
            acts, cfg.components, max_iters=cfg.em_max_iters, tol=cfg.em_tol,
            seed=derive_seed(self.master_seed, "ent-em", k),
        )
        return float(gmm_entropy_rows(weights, variances).mean())

    def _abort(self, what: str, value: float) -> TrainingDiverged:
        snapshot = None
        if self.out_dir is not None:
            snapshot = self.out_dir / f"diverged_k{self.update_k}.ckpt"
            save_checkpoint(snapshot, self.checkpoint_payload(include_buffer=False))
        return TrainingDiverged(
            f"{what} became non-finite ({value}) at update {self.update_k}", snapshot
        )

    def train_iteration(self) -> dict:
        """One sampling pass plus the scheduled gradient updates."""
        t0 = time.perf_counter()
        cfg = self.config.trainer
        self.iteration += 1

        stats = self.pool.collect(
            self.policy, self.alpha, self.exploration, cfg.sampler_steps, self.buffer
        )
        for r, l in zip(stats.returns, stats.lengths):
            self.episode_window.append((r, l))

        warming_up = self.buffer.size < max(cfg.warmup_transitions, cfg.batch_size)
        if not warming_up:
            for _ in range(cfg.updates_per_iteration):
                self.update_k += 1
                k = self.update_k
                batch = self.buffer.sample(cfg.batch_size, rng_from(self.master_seed, "batch", k))
                targets = build_bellman_targets(
                    batch, self.dvn, self.policy, self.alpha, cfg.gamma,
                    derive_seed(self.master_seed, "targets", k),
                    entropy_correction=cfg.entropy_correction,
                    n_density_actions=cfg.n_density_actions,
                    gmm_components=self.config.entropy.components,
                )
                self.dvn.normalizer.update(targets.values)
                loss = dvn_loss(self.dvn, targets, batch, self._torch_gen("dvn-loss", k))
                j_z = float(loss.detach())
                if not math.isfinite(j_z):
                    raise self._abort("value loss", j_z)
                self.opt_value.zero_grad()
                loss.backward()
                self.opt_value.step()
                self._last["j_z"] = j_z

                if k % cfg.delayed_update_interval == 0:
                    ent_cfg = self.config.entropy
                    density_fit = fit_action_density(
                        self.policy, batch.states, ent_cfg.n_actions, ent_cfg.components,
                        derive_seed(self.master_seed, "pi-density", k),
                        em_max_iters=ent_cfg.em_max_iters, em_tol=ent_cfg.em_tol,
                    )
                    j_pi_t = policy_loss(
                        self.policy, self.dvn, batch.states, self.alpha,
                        cfg.n_q_samples, self._torch_gen("pi-loss", k),
                        density_fit=density_fit if cfg.policy_entropy_in_loss else None,
                    )
                    j_pi = float(j_pi_t.detach())
                    if not math.isfinite(j_pi):
                        raise self._abort("policy objective", j_pi)
                    self.opt_policy.zero_grad()
                    (-j_pi_t).backward()
                    self.opt_policy.step()

                    if ent_cfg.on_behavior_policy:
                        h_hat = self._estimate_entropy_behavior(batch.states, k)
                    else:
                        h_hat = density_fit.mean_entropy()
                    if not math.isfinite(h_hat):
                        raise self._abort("entropy estimate", h_hat)
                    self.alpha_controller = update_alpha(self.alpha_controller, h_hat)
                    soft_update(self.dvn.target_predictor, self.dvn.predictor, cfg.tau)
                    soft_update(self.policy.target_predictor, self.policy.predictor, cfg.tau)
                    self._last.update({"j_pi": j_pi, "h_hat": h_hat, "q_mean": j_pi})

        window = list(self.episode_window)
        record = {
            "iteration": self.iteration,
            "k": self.update_k,
            "j_z": self._last["j_z"],
            "j_pi": self._last["j_pi"],
            "h_hat": self._last["h_hat"],
            "alpha": self.alpha,
            "q_mean": self._last["q_mean"],
            "ep_return_mean": float(np.mean([r for r, _ in window])) if window else None,
            "ep_return_std": float(np.std([r for r, _ in window])) if window else None,
            "ep_len_mean": float(np.mean([l for _, l in window])) if window else None,
            "buffer_size": self.buffer.size,
            "warming_up": warming_up,
            "wall_time": time.perf_counter() - t0,
        }
        return record

    # -- persistence ----------------------------------------------------------

    def checkpoint_payload(self, include_buffer: bool = True) -> dict:
        payload = {
            "payload_version": CHECKPOINT_PAYLOAD_VERSION,
            "config": self.config.model_dump(mode="json"),
            "iteration": self.iteration,
            "update_k": self.update_k,
            "master_seed": self.master_seed,
            "alpha": self.alpha_controller.alpha,
            "dvn_predictor": self.dvn.predictor.state_dict(),
            "dvn_target": self.dvn.target_predictor.state_dict(),
            "dvn_normalizer": self.dvn.normalizer.state_dict(),
            "policy_predictor": self.policy.predictor.state_dict(),
            "policy_target": self.policy.target_predictor.state_dict(),
            "opt_value": self.opt_value.state_dict(),
            "opt_policy": self.opt_policy.state_dict(),
            "pool": self.pool.state_dict(),
            "episode_window": [list(x) for x in self.episode_window],
            "last_metrics": dict(self._last),
            "buffer": self.buffer.state_dict() if include_buffer else None,
        }
        return payload

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint_payload())

    @classmethod
    def from_checkpoint(cls, path, out_dir: Optional[Path] = None) -> "Trainer":
        payload = load_checkpoint(path)
        if payload.get("payload_version") != CHECKPOINT_PAYLOAD_VERSION:
            raise ValueError(
                f"trainer payload version mismatch: expected {CHECKPOINT_PAYLOAD_VERSION}, "
                f"found {payload.get('payload_version')}"
            )
        config = RunConfig.model_validate(payload["config"])
        trainer = cls(config, out_dir=out_dir)
        trainer.iteration = payload["iteration"]
        trainer.update_k = payload["update_k"]
        trainer.master_seed = payload["master_seed"]
        trainer.alpha_controller = AlphaController(
            alpha=payload["alpha"],
            beta_alpha=trainer.alpha_controller.beta_alpha,
            target_entropy=trainer.alpha_controller.target_entropy,
            alpha_min=trainer.alpha_controller.alpha_min,
            alpha_max=trainer.alpha_controller.alpha_max,
        )
        trainer.dvn.predictor.load_state_dict(payload["dvn_predictor"])
        trainer.dvn.target_predictor.load_state_dict(payload["dvn_target"])
        trainer.dvn.normalizer.load_state_dict(payload["dvn_normalizer"])
        trainer.policy.predictor.load_state_dict(payload["policy_predictor"])
        trainer.policy.target_predictor.load_state_dict(payload["policy_target"])
        trainer.opt_value.load_state_dict(payload["opt_value"])
        trainer.opt_policy.load_state_dict(payload["opt_policy"])
        trainer.pool.load_state_dict(payload["pool"])
        trainer.episode_window = deque(
            [tuple(x) for x in payload["episode_window"]], maxlen=50
        )
        trainer._last = dict(payload["last_metrics"])
        if payload["buffer"] is not None:
            trainer.buffer = ReplayBuffer.from_state_dict(payload["buffer"])
        return trainer
