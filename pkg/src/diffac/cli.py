"""Command-line front end.

Each subcommand is a thin client over the same operations the HTTP service
exposes: by default they run in-process; with --server they call a running
service instead, so scripted workflows behave identically either way.
"""

from __future__ import annotations

import json
import sys
import time
from pathlib import Path

import click
import yaml
from pydantic import ValidationError

from .config import ConfigError, load_config, parse_override
from .plots import PLOT_KINDS, emit_plot
from .runs import resolve_out_dir, run_eval, run_training


def _parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs:
        key, value = parse_override(pair)
        overrides[key] = value
    return overrides


def _fail(message: str, code: int = 2):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


@click.group(help="Train, evaluate and plot diffusion actor-critic runs.")
def main():
    pass


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True),
              help="YAML run configuration.")
@click.option("--override", "overrides", multiple=True,
              help="Dotted config override, e.g. trainer.gamma=0.95 (repeatable).")
@click.option("--seed", type=int, default=None, help="Override the run seed.")
@click.option("--out", "out_dir", required=True, type=click.Path(),
              help="Output directory (relative paths resolve under $DIFFAC_OUT_ROOT).")
@click.option("--server", default=None, help="Base URL of a running service.")
def train(config_path, overrides, seed, out_dir, server):
    """Run training; writes resolved config, metrics and checkpoints."""
    try:
        ov = _parse_overrides(overrides)
        if seed is not None:
            ov["seed"] = seed
        config = load_config(path=Path(config_path), overrides=ov)
    except (ValidationError, ConfigError) as exc:
        _fail(str(exc))

    if server:
        import httpx

        with open(config_path) as f:
            tree = yaml.safe_load(f) or {}
        payload = {"config": tree, "overrides": ov, "out_dir": str(out_dir)}
        resp = httpx.post(f"{server}/runs", json=payload, timeout=60.0)
        if resp.status_code >= 400:
            _fail(f"server rejected run: {resp.text}")
        run_id = resp.json()["run_id"]
        click.echo(f"run {run_id} started on {server}")
        while True:
            status = httpx.get(f"{server}/runs/{run_id}", timeout=60.0).json()
            if status["state"] != "running":
                break
            time.sleep(0.5)
        click.echo(json.dumps(status, indent=2))
        sys.exit(0 if status["state"] == "finished" else 1)

    result = run_training(config, out_dir)
    click.echo(
        f"status={result.status} iterations={result.iterations_run} "
        f"metrics={result.metrics_path} checkpoint={result.checkpoint_path}"
    )
    if result.status != "ok":
        click.echo(f"aborted: {result.message}", err=True)
        sys.exit(1)


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--env", "env_name", default=None, help="Environment name (defaults to checkpoint's).")
@click.option("--episodes", "n_episodes", type=int, default=20)
@click.option("--deterministic", is_flag=True, help="Zero the per-step sampler noise.")
@click.option("--bias", is_flag=True, help="Also report value-estimation bias.")
@click.option("--seed", type=int, default=0)
@click.option("--server", default=None, help="Base URL of a running service.")
def eval_cmd(checkpoint, env_name, n_episodes, deterministic, bias, seed, server):
    """Evaluate a checkpoint: episode returns, optionally value bias."""
    if server:
        import httpx

        payload = {
            "checkpoint": str(checkpoint), "env": env_name, "n_episodes": n_episodes,
            "deterministic": deterministic, "bias": bias, "seed": seed,
        }
        resp = httpx.post(f"{server}/eval", json=payload, timeout=None)
        if resp.status_code >= 400:
            _fail(f"server rejected eval: {resp.text}")
        click.echo(json.dumps(resp.json(), indent=2))
        return

    try:
        report = run_eval(
            checkpoint, env_name=env_name, n_episodes=n_episodes,
            deterministic=deterministic, bias=bias, seed=seed,
        )
    except (ValueError, FileNotFoundError) as exc:
        _fail(str(exc))
    click.echo(json.dumps(report.to_dict(), indent=2))


@main.command()
@click.option("--kind", required=True, type=click.Choice(PLOT_KINDS))
@click.option("--metrics", "metrics_path", default=None, type=click.Path(exists=True),
              help="Metrics file (for kind=curves).")
@click.option("--checkpoint", default=None, type=click.Path(exists=True),
              help="Checkpoint file (for the other kinds).")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--server", default=None, help="Base URL of a running service.")
def plot(kind, metrics_path, checkpoint, out_path, server):
    """Emit a figure from run artifacts."""
    artifact = metrics_path if kind == "curves" else checkpoint
    if artifact is None:
        needed = "--metrics" if kind == "curves" else "--checkpoint"
        _fail(f"plot kind {kind!r} needs {needed}")

    if server:
        import httpx

        payload = {"kind": kind, "artifact": str(artifact), "out": str(out_path)}
        resp = httpx.post(f"{server}/plots", json=payload, timeout=None)
        if resp.status_code >= 400:
            _fail(f"server rejected plot: {resp.text}")
        click.echo(resp.json()["path"])
        return

    try:
        path = emit_plot(kind, artifact, resolve_out_dir(out_path))
    except (ValueError, FileNotFoundError) as exc:
        _fail(str(exc))
    click.echo(str(path))


@main.command()
@click.option("--host", default="127.0.0.1")
@click.option("--port", type=int, default=8000)
@click.option("--out-root", default=None, type=click.Path(),
              help="Directory for service-managed runs (default $DIFFAC_OUT_ROOT or ./runs).")
def serve(host, port, out_root):
    """Start the HTTP service."""
    import uvicorn

    from .service import create_app

    app = create_app(Path(out_root) if out_root else None)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
