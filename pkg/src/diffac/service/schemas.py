"""Request/response models for the HTTP service."""

from __future__ import annotations

from typing import Any, Dict, List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field


class TrainRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: Dict[str, Any]
    overrides: Dict[str, Any] = Field(default_factory=dict)
    seed: Optional[int] = None
    out_dir: Optional[str] = None


class RunStatus(BaseModel):
    run_id: str
    state: Literal["running", "finished", "failed"]
    iteration: int
    total_iterations: int
    out_dir: str
    message: str = ""
    checkpoint_path: Optional[str] = None


class MetricsResponse(BaseModel):
    run_id: str
    records: List[Dict[str, Any]]


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    env: Optional[str] = None
    n_episodes: int = 20
    deterministic: bool = False
    bias: bool = False
    seed: int = 0


class BiasResponse(BaseModel):
    n_pairs: int
    mean_bias: float
    relative_bias: float
    mean_q_estimate: float
    mean_q_true: float


class EvalResponse(BaseModel):
    n_episodes: int
    return_mean: Optional[float]
    return_std: Optional[float]
    length_mean: Optional[float]
    bias: Optional[BiasResponse] = None


class SampleActionsRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    state: List[float]
    n: int = 1
    seed: int = 0
    deterministic: bool = False


class SampleActionsResponse(BaseModel):
    actions: List[List[float]]


class SampleReturnsRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    checkpoint: str
    state: List[float]
    action: List[float]
    n: int = 1
    seed: int = 0


class SampleReturnsResponse(BaseModel):
    returns: List[float]


class PlotRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["curves", "return_hist", "action_modes", "trajectories"]
    artifact: str  # metrics file for curves, checkpoint otherwise
    out: str


class PlotResponse(BaseModel):
    path: str


class HealthResponse(BaseModel):
    status: str
    version: str
