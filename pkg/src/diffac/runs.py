"""Run orchestration shared by the CLI and the HTTP service.

A training run owns an output directory containing the resolved config
snapshot, the metrics stream and checkpoints; evaluation and sampling load
a checkpoint and drive the restored models. Both front ends call these
functions, so behavior cannot drift between them.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from .config import RunConfig, dump_config
from .envs import make_env
from .metrics import MetricsWriter
from .seeding import derive_seed
from .training import Trainer, TrainingDiverged
from .value import BiasReport, evaluate_bias

CONFIG_SNAPSHOT = "config_resolved.yaml"
METRICS_FILE = "metrics.jsonl"
FINAL_CHECKPOINT = "final.ckpt"


def resolve_out_dir(out_dir) -> Path:
    """Resolve an output directory against the optional output-root env var."""
    out_dir = Path(out_dir)
    root = os.environ.get("DIFFAC_OUT_ROOT")
    if root and not out_dir.is_absolute():
        return Path(root) / out_dir
    return out_dir


@dataclass
class TrainResult:
    status: str  # "ok" | "diverged"
    out_dir: Path
    iterations_run: int
    metrics_path: Path
    checkpoint_path: Optional[Path]
    message: str = ""


def run_training(
    config: RunConfig,
    out_dir,
    progress_cb: Optional[Callable[[int, dict], None]] = None,
) -> TrainResult:
    """Train per the config, writing config snapshot, metrics and checkpoints."""
    out_dir = resolve_out_dir(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(config, out_dir / CONFIG_SNAPSHOT)

    trainer = Trainer(config, out_dir=out_dir)
    writer = MetricsWriter(out_dir / METRICS_FILE)
    checkpoint_path = out_dir / FINAL_CHECKPOINT
    status, message = "ok", ""
    iterations_run = 0
    try:
        for i in range(config.iterations):
            record = trainer.train_iteration()
            iterations_run = i + 1
            if config.log_interval and (i + 1) % config.log_interval == 0:
                writer.append(record)
            if (
                config.checkpoint_interval
                and (i + 1) % config.checkpoint_interval == 0
            ):
                trainer.save(out_dir / f"iter_{i + 1:07d}.ckpt")
            if progress_cb is not None:
                progress_cb(i + 1, record)
        trainer.save(checkpoint_path)
    except TrainingDiverged as exc:
        status = "diverged"
        message = str(exc)
        checkpoint_path = exc.snapshot_path
    finally:
        writer.close()
    return TrainResult(
        status=status,
        out_dir=out_dir,
        iterations_run=iterations_run,
        metrics_path=out_dir / METRICS_FILE,
        checkpoint_path=checkpoint_path,
        message=message,
    )


@dataclass
class EvalReport:
    n_episodes: int
    return_mean: Optional[float]
    return_std: Optional[float]
    length_mean: Optional[float]
    bias: Optional[BiasReport] = None

    def to_dict(self) -> dict:
        d = {
            "n_episodes": self.n_episodes,
            "return_mean": self.return_mean,
            "return_std": self.return_std,
            "length_mean": self.length_mean,
        }
        if self.bias is not None:
            d["bias"] = {
                "n_pairs": self.bias.n_pairs,
                "mean_bias": self.bias.mean_bias,
                "relative_bias": self.bias.relative_bias,
                "mean_q_estimate": self.bias.mean_q_estimate,
                "mean_q_true": self.bias.mean_q_true,
            }
        return d


def load_trained(checkpoint_path) -> Trainer:
    return Trainer.from_checkpoint(checkpoint_path)


def run_eval(
    checkpoint_path,
    env_name: Optional[str] = None,
    n_episodes: int = 20,
    deterministic: bool = False,
    bias: bool = False,
    seed: int = 0,
    bias_episodes: int = 500,
    bias_value_samples: int = 64,
) -> EvalReport:
    """Roll out a trained policy; optionally probe value-estimation bias."""
    trainer = load_trained(checkpoint_path)
    name = env_name or trainer.config.env.name
    if env_name is not None and env_name != trainer.config.env.name:
        raise ValueError(
            f"checkpoint was trained on {trainer.config.env.name!r}, not {env_name!r}"
        )
    env = make_env(name, trainer.config.env.overrides)
    spec = env.spec()
    if spec.state_dim != trainer.policy.state_dim or spec.action_dim != trainer.policy.action_dim:
        raise ValueError("environment dimensions do not match the checkpoint")

    returns, lengths = [], []
    for ep in range(n_episodes):
        state = env.reset(derive_seed(seed, "eval-env", ep))
        total, steps = 0.0, 0
        for t in range(spec.max_episode_len):
            action = trainer.policy.act(
                state, derive_seed(seed, "eval-act", ep, t), deterministic=deterministic
            )
            state, reward, terminal, truncated = env.step(action)
            total += reward
            steps += 1
            if terminal or truncated:
                break
        returns.append(total)
        lengths.append(steps)

    report = EvalReport(
        n_episodes=n_episodes,
        return_mean=float(np.mean(returns)) if returns else None,
        return_std=float(np.std(returns)) if returns else None,
        length_mean=float(np.mean(lengths)) if lengths else None,
    )
    if bias:
        report.bias = evaluate_bias(
            trainer.dvn,
            make_env(name, trainer.config.env.overrides),
            trainer.policy,
            gamma=trainer.config.trainer.gamma,
            n_episodes=bias_episodes,
            horizon=spec.max_episode_len,
            alpha=trainer.alpha,
            n_value_samples=bias_value_samples,
            seed=derive_seed(seed, "bias"),
        )
    return report


def sample_policy_actions(
    checkpoint_path, state, n: int, seed: int, deterministic: bool = False
) -> np.ndarray:
    trainer = load_trained(checkpoint_path)
    return trainer.policy.sample_actions(
        np.asarray(state, dtype=np.float64), n, seed, deterministic=deterministic
    )


def sample_model_returns(checkpoint_path, state, action, n: int, seed: int) -> np.ndarray:
    from .value import sample_returns

    trainer = load_trained(checkpoint_path)
    return sample_returns(
        trainer.dvn, np.asarray(state, dtype=np.float64),
        np.asarray(action, dtype=np.float64), n, seed,
    )
