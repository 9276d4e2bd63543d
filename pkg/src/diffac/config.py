"""Run configuration: a strictly validated tree of every tunable.

Unknown keys are rejected everywhere (a silently ignored typo in an RL
config is a reproducibility killer), and the fully resolved tree is written
next to each run's artifacts so a run can be reproduced from its snapshot
alone.
"""

from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, field_validator


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class ScheduleConfig(StrictModel):
    steps: int = 20
    beta_min: float = 1e-4
    beta_max: float = 0.999
    shape: Literal["linear", "cosine"] = "cosine"

    @field_validator("steps")
    @classmethod
    def _steps_positive(cls, v):
        if v < 1:
            raise ValueError("steps must be >= 1")
        return v


class NetworkConfig(StrictModel):
    hidden: List[int] = Field(default_factory=lambda: [64, 64])
    activation: Literal["gelu", "relu", "tanh", "mish"] = "gelu"


class EnvConfig(StrictModel):
    name: str
    overrides: Dict[str, Any] = Field(default_factory=dict)


class ValueConfig(StrictModel):
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)


class PolicyConfig(StrictModel):
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)


class EntropyConfig(StrictModel):
    components: int = 2
    n_actions: int = 32
    em_max_iters: int = 50
    em_tol: float = 1e-6
    target_entropy: Optional[float] = None  # None -> -action_dim
    beta_alpha: float = 0.02
    alpha_init: float = 0.2
    alpha_min: float = 1e-6
    alpha_max: float = 10.0
    batch_states: int = 16
    on_behavior_policy: bool = False

    @field_validator("n_actions")
    @classmethod
    def _enough_samples(cls, v):
        if v < 1:
            raise ValueError("n_actions must be >= 1")
        return v


class ExplorationSettings(StrictModel):
    lam: float = 0.1
    enabled: bool = True

    @field_validator("lam")
    @classmethod
    def _nonneg(cls, v):
        if v < 0:
            raise ValueError("lam must be >= 0")
        return v


class TrainerSettings(StrictModel):
    gamma: float = 0.99
    beta_z: float = 3e-4
    beta_pi: float = 3e-4
    tau: float = 0.005
    delayed_update_interval: int = 2
    batch_size: int = 256
    buffer_capacity: int = 100_000
    warmup_transitions: int = 2560
    n_samplers: int = 20
    sampler_steps: int = 1
    updates_per_iteration: int = 1
    n_q_samples: int = 2
    entropy_correction: Literal["gmm_logpi", "gmm_entropy", "none"] = "gmm_logpi"
    n_density_actions: int = 16
    policy_entropy_in_loss: bool = True

    @field_validator("gamma")
    @classmethod
    def _gamma_range(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        return v

    @field_validator("tau")
    @classmethod
    def _tau_range(cls, v):
        if not 0.0 < v <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        return v

    @field_validator("delayed_update_interval")
    @classmethod
    def _interval_range(cls, v):
        if v < 1:
            raise ValueError("delayed_update_interval must be >= 1")
        return v


class RunConfig(StrictModel):
    env: EnvConfig
    iterations: int = 1000
    seed: int = 0
    log_interval: int = 1
    checkpoint_interval: int = 0  # 0 -> final checkpoint only
    trainer: TrainerSettings = Field(default_factory=TrainerSettings)
    value: ValueConfig = Field(default_factory=ValueConfig)
    policy: PolicyConfig = Field(default_factory=PolicyConfig)
    entropy: EntropyConfig = Field(default_factory=EntropyConfig)
    exploration: ExplorationSettings = Field(default_factory=ExplorationSettings)

    @field_validator("iterations")
    @classmethod
    def _iters_nonneg(cls, v):
        if v < 0:
            raise ValueError("iterations must be >= 0")
        return v


class ConfigError(ValueError):
    pass


def apply_overrides(tree: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Apply dotted-key overrides ("trainer.gamma" -> 0.95) to a config tree."""
    out = copy.deepcopy(tree)
    for dotted, value in overrides.items():
        parts = dotted.split(".")
        node = out
        for p in parts[:-1]:
            if p not in node or node[p] is None:
                node[p] = {}
            if not isinstance(node[p], dict):
                raise ConfigError(f"override path {dotted!r} crosses non-mapping key {p!r}")
            node = node[p]
        node[parts[-1]] = value
    return out


def parse_override(text: str) -> tuple:
    """Parse a key=value override; the value is read as a YAML scalar."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(
    path: Optional[Path] = None,
    tree: Optional[Dict[str, Any]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Build a validated RunConfig from a YAML file or an in-memory tree."""
    if (path is None) == (tree is None):
        raise ConfigError("pass exactly one of path or tree")
    if path is not None:
        with open(path) as f:
            tree = yaml.safe_load(f) or {}
    if not isinstance(tree, dict):
        raise ConfigError("config root must be a mapping")
    if overrides:
        tree = apply_overrides(tree, overrides)
    return RunConfig.model_validate(tree)


def dump_config(config: RunConfig, path: Path) -> None:
    with open(path, "w") as f:
        yaml.safe_dump(config.model_dump(mode="json"), f, sort_keys=False)
