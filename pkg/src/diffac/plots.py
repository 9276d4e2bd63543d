"""Read-only figure emission from run artifacts."""

from __future__ import annotations

import warnings
from pathlib import Path
from typing import List, Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .entropy import em_fit, gmm_log_density_batch
from .envs import BimodalBandit, TwoGoalPointMass, make_env
from .metrics import read_metrics
from .seeding import derive_seed

PLOT_KINDS = ("curves", "return_hist", "action_modes", "trajectories")

_CURVE_FIELDS = ("j_z", "j_pi", "h_hat", "alpha", "q_mean", "ep_return_mean")


def plot_curves(metrics_path, out_path) -> Path:
    """Training curves: one panel per logged scalar."""
    records = read_metrics(metrics_path)
    fig, axes = plt.subplots(2, 3, figsize=(13, 7))
    if not records:
        warnings.warn("metrics file is empty; emitting a blank curves plot")
    for ax, field in zip(axes.ravel(), _CURVE_FIELDS):
        xs = [r["k"] for r in records if r.get(field) is not None]
        ys = [r[field] for r in records if r.get(field) is not None]
        ax.plot(xs, ys, lw=1.0)
        ax.set_title(field)
        ax.set_xlabel("update")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_return_hist(checkpoint_path, out_path, n_samples: int = 4000, seed: int = 0) -> Path:
    """Histogram of value-model return draws at the start state.

    For the bandit the analytic reward density at the queried action is
    overlaid as the ground-truth reference.
    """
    from .runs import load_trained
    from .value import sample_returns

    trainer = load_trained(checkpoint_path)
    env = make_env(trainer.config.env.name, trainer.config.env.overrides)
    state = env.reset(derive_seed(seed, "plot-env"))
    action = trainer.policy.act(state, derive_seed(seed, "plot-act"))
    draws = sample_returns(trainer.dvn, state, action, n_samples, derive_seed(seed, "plot-z"))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.hist(draws, bins=80, density=True, alpha=0.6, label="model return draws")
    if isinstance(env, BimodalBandit):
        mu = env.mean_reward(float(action[0]))
        xs = np.linspace(draws.min(), draws.max(), 400)
        pdf = np.exp(-0.5 * ((xs - mu) / env.noise_std) ** 2) / (
            env.noise_std * np.sqrt(2 * np.pi)
        )
        ax.plot(xs, pdf, "k--", label="true reward density")
    ax.set_xlabel("return")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_action_modes(
    checkpoint_path, out_path, n_samples: int = 300, seed: int = 0, components: int = 2
) -> Path:
    """Sampled actions at the start state with fitted mixture overlays."""
    from .runs import load_trained

    trainer = load_trained(checkpoint_path)
    env = make_env(trainer.config.env.name, trainer.config.env.overrides)
    state = env.reset(derive_seed(seed, "plot-env"))
    actions = trainer.policy.sample_actions(state, n_samples, derive_seed(seed, "plot-a"))
    fit = em_fit(actions, components, seed=derive_seed(seed, "plot-em"))

    fig, ax = plt.subplots(figsize=(7, 4.5))
    if actions.shape[1] == 1:
        ax.hist(actions[:, 0], bins=60, density=True, alpha=0.6, label="sampled actions")
        xs = np.linspace(actions.min() - 0.2, actions.max() + 0.2, 400)
        dens = np.exp(gmm_log_density_batch(fit, xs[:, None]))
        ax.plot(xs, dens, "k--", label=f"{components}-component fit")
        ax.set_xlabel("action")
    else:
        ax.scatter(actions[:, 0], actions[:, 1], s=8, alpha=0.5, label="sampled actions")
        ax.scatter(fit.means[:, 0], fit.means[:, 1], marker="x", s=120, c="red",
                   label="mixture means")
        ax.set_xlabel("action[0]")
        ax.set_ylabel("action[1]")
    ax.legend()
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_trajectories(
    checkpoint_path, out_path, n_episodes: int = 40, seed: int = 0
) -> Path:
    """Point-mass rollouts colored by which goal each trajectory settles on."""
    from .runs import load_trained

    trainer = load_trained(checkpoint_path)
    env = make_env(trainer.config.env.name, trainer.config.env.overrides)
    if not isinstance(env, TwoGoalPointMass):
        raise ValueError("trajectory plots need the two-goal point-mass environment")

    fig, ax = plt.subplots(figsize=(6.5, 6.5))
    colors = {0: "tab:blue", 1: "tab:orange"}
    for ep in range(n_episodes):
        state = env.reset(derive_seed(seed, "plot-env", ep))
        path = [state[:2].copy()]
        for t in range(env.max_steps):
            action = trainer.policy.act(state, derive_seed(seed, "plot-act", ep, t))
            state, _, terminal, truncated = env.step(action)
            path.append(state[:2].copy())
            if terminal or truncated:
                break
        path = np.array(path)
        cluster = env.nearest_goal_index(state)
        ax.plot(path[:, 0], path[:, 1], color=colors[cluster], alpha=0.45, lw=1.2)

    obstacle = plt.Circle(env.obstacle_center, env.obstacle_radius, color="gray", alpha=0.5)
    ax.add_patch(obstacle)
    for gi, goal in enumerate(env.goals):
        ax.scatter(*goal, marker="*", s=220, color=colors[gi], edgecolor="k", zorder=5)
    ax.scatter(*env.start, marker="o", s=60, color="k", zorder=5)
    ax.set_aspect("equal")
    ax.set_xlabel("x")
    ax.set_ylabel("y")
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def emit_plot(kind: str, artifact_path, out_path, **kwargs) -> Path:
    """Dispatch on plot kind; artifact_path is a metrics file or checkpoint."""
    if kind == "curves":
        return plot_curves(artifact_path, out_path)
    if kind == "return_hist":
        return plot_return_hist(artifact_path, out_path, **kwargs)
    if kind == "action_modes":
        return plot_action_modes(artifact_path, out_path, **kwargs)
    if kind == "trajectories":
        return plot_trajectories(artifact_path, out_path, **kwargs)
    raise ValueError(f"unknown plot kind {kind!r}; options: {PLOT_KINDS}")
