"""HTTP facade over the training, evaluation and plotting operations."""

from __future__ import annotations

import os
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, HTTPException
from pydantic import ValidationError

from .. import __version__
from ..config import ConfigError, apply_overrides, load_config
from ..metrics import read_metrics
from ..plots import emit_plot
from ..runs import METRICS_FILE, resolve_out_dir, run_eval, sample_model_returns, \
    sample_policy_actions
from .jobs import JobManager
from .schemas import (
    BiasResponse,
    EvalRequest,
    EvalResponse,
    HealthResponse,
    MetricsResponse,
    PlotRequest,
    PlotResponse,
    RunStatus,
    SampleActionsRequest,
    SampleActionsResponse,
    SampleReturnsRequest,
    SampleReturnsResponse,
    TrainRequest,
)


def create_app(out_root: Optional[Path] = None) -> FastAPI:
    if out_root is None:
        out_root = Path(os.environ.get("DIFFAC_OUT_ROOT", "runs"))
    app = FastAPI(title="diffac", version=__version__)
    jobs = JobManager(out_root)
    app.state.jobs = jobs

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/runs", response_model=RunStatus, status_code=201)
    def start_run(request: TrainRequest) -> RunStatus:
        tree = request.config
        if request.overrides:
            tree = apply_overrides(tree, request.overrides)
        if request.seed is not None:
            tree = {**tree, "seed": request.seed}
        try:
            config = load_config(tree=tree)
        except (ValidationError, ConfigError) as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        job = jobs.start(config, out_dir=request.out_dir)
        return RunStatus(**jobs.snapshot(job.run_id))

    @app.get("/runs/{run_id}", response_model=RunStatus)
    def run_status(run_id: str) -> RunStatus:
        snap = jobs.snapshot(run_id)
        if snap is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        return RunStatus(**snap)

    @app.get("/runs/{run_id}/metrics", response_model=MetricsResponse)
    def run_metrics(run_id: str, tail: int = 0) -> MetricsResponse:
        snap = jobs.snapshot(run_id)
        if snap is None:
            raise HTTPException(status_code=404, detail=f"unknown run {run_id}")
        path = Path(snap["out_dir"]) / METRICS_FILE
        records = read_metrics(path) if path.exists() else []
        if tail > 0:
            records = records[-tail:]
        return MetricsResponse(run_id=run_id, records=records)

    @app.post("/eval", response_model=EvalResponse)
    def eval_checkpoint(request: EvalRequest) -> EvalResponse:
        try:
            report = run_eval(
                request.checkpoint,
                env_name=request.env,
                n_episodes=request.n_episodes,
                deterministic=request.deterministic,
                bias=request.bias,
                seed=request.seed,
            )
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        bias = None
        if report.bias is not None:
            bias = BiasResponse(
                n_pairs=report.bias.n_pairs,
                mean_bias=report.bias.mean_bias,
                relative_bias=report.bias.relative_bias,
                mean_q_estimate=report.bias.mean_q_estimate,
                mean_q_true=report.bias.mean_q_true,
            )
        return EvalResponse(
            n_episodes=report.n_episodes,
            return_mean=report.return_mean,
            return_std=report.return_std,
            length_mean=report.length_mean,
            bias=bias,
        )

    @app.post("/actions/sample", response_model=SampleActionsResponse)
    def sample_actions(request: SampleActionsRequest) -> SampleActionsResponse:
        try:
            acts = sample_policy_actions(
                request.checkpoint, request.state, request.n, request.seed,
                deterministic=request.deterministic,
            )
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return SampleActionsResponse(actions=acts.tolist())

    @app.post("/returns/sample", response_model=SampleReturnsResponse)
    def sample_returns_endpoint(request: SampleReturnsRequest) -> SampleReturnsResponse:
        try:
            vals = sample_model_returns(
                request.checkpoint, request.state, request.action, request.n, request.seed
            )
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return SampleReturnsResponse(returns=vals.tolist())

    @app.post("/plots", response_model=PlotResponse)
    def make_plot(request: PlotRequest) -> PlotResponse:
        try:
            path = emit_plot(request.kind, request.artifact, resolve_out_dir(request.out))
        except FileNotFoundError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return PlotResponse(path=str(path))

    return app
