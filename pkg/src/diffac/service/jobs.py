"""In-process background training jobs.

Training runs are long; the service launches each one on a worker thread
and exposes its live status. State transitions are guarded by a lock, and
the run's metrics land on disk exactly as they do for CLI runs, so a
crashed service loses nothing but the status cache.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

from ..config import RunConfig
from ..runs import run_training


@dataclass
class Job:
    run_id: str
    config: RunConfig
    out_dir: Path
    state: str = "running"  # running | finished | failed
    iteration: int = 0
    message: str = ""
    checkpoint_path: Optional[Path] = None
    thread: Optional[threading.Thread] = None


class JobManager:
    def __init__(self, out_root: Path):
        self.out_root = Path(out_root)
        self.out_root.mkdir(parents=True, exist_ok=True)
        self._jobs: Dict[str, Job] = {}
        self._lock = threading.Lock()

    def start(self, config: RunConfig, out_dir: Optional[str] = None) -> Job:
        run_id = uuid.uuid4().hex[:12]
        target_dir = Path(out_dir) if out_dir else self.out_root / run_id
        job = Job(run_id=run_id, config=config, out_dir=target_dir)
        with self._lock:
            self._jobs[run_id] = job

        def _progress(iteration: int, record: dict) -> None:
            with self._lock:
                job.iteration = iteration

        def _run() -> None:
            try:
                result = run_training(config, target_dir, progress_cb=_progress)
                with self._lock:
                    job.state = "finished" if result.status == "ok" else "failed"
                    job.message = result.message
                    job.checkpoint_path = result.checkpoint_path
                    job.iteration = result.iterations_run
            except Exception as exc:  # surface the failure via status
                with self._lock:
                    job.state = "failed"
                    job.message = f"{type(exc).__name__}: {exc}"

        thread = threading.Thread(target=_run, name=f"train-{run_id}", daemon=True)
        job.thread = thread
        thread.start()
        return job

    def get(self, run_id: str) -> Optional[Job]:
        with self._lock:
            return self._jobs.get(run_id)

    def snapshot(self, run_id: str) -> Optional[dict]:
        with self._lock:
            job = self._jobs.get(run_id)
            if job is None:
                return None
            return {
                "run_id": job.run_id,
                "state": job.state,
                "iteration": job.iteration,
                "total_iterations": job.config.iterations,
                "out_dir": str(job.out_dir),
                "message": job.message,
                "checkpoint_path": (
                    str(job.checkpoint_path) if job.checkpoint_path else None
                ),
            }

    def wait(self, run_id: str, timeout: Optional[float] = None) -> None:
        job = self.get(run_id)
        if job is not None and job.thread is not None:
            job.thread.join(timeout)
