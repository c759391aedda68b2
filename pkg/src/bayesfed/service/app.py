"""FastAPI application: submit runs, poll state, fetch artifacts."""

from __future__ import annotations

import json
from pathlib import Path

from fastapi import FastAPI, HTTPException

from .. import __version__, experiment
from ..autodiff import NumericError
from ..data import FormatError
from ..models import CheckpointError
from .jobs import JobRegistry
from .schemas import (
    DatasetRequest,
    EvalRequest,
    Health,
    JobInfo,
    JobList,
    RunRequest,
)


def create_app(run_root="runs") -> FastAPI:
    app = FastAPI(title="bayesfed", version=__version__)
    registry = JobRegistry(run_root)
    app.state.registry = registry

    @app.get("/health", response_model=Health)
    def health():
        return Health(status="ok", version=__version__)

    def _inline(kind: str, work):
        # short tasks answer in the request thread; no job record kept
        out = registry.allocate_dir(kind)
        try:
            return {"out_dir": str(out), "summary": work(out)}
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        except (FileNotFoundError, FormatError, CheckpointError) as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        except NumericError as exc:
            raise HTTPException(status_code=500, detail=str(exc))

    @app.post("/datasets")
    def gen_data(req: DatasetRequest):
        return _inline("data", lambda out: experiment.gen_data(req.config, out))

    @app.post("/runs/train", response_model=JobInfo)
    def submit_train(req: RunRequest):
        return registry.submit(
            "train", lambda out: experiment.run_train(req.config, out, threads=req.threads)
        )

    @app.post("/runs/active", response_model=JobInfo)
    def submit_active(req: RunRequest):
        return registry.submit(
            "active", lambda out: experiment.run_active(req.config, out, threads=req.threads)
        )

    @app.get("/runs", response_model=JobList)
    def list_runs():
        return JobList(runs=registry.list())

    def _job_or_404(run_id: str) -> dict:
        info = registry.get(run_id)
        if info is None:
            raise HTTPException(status_code=404, detail=f"no run named {run_id!r}")
        return info

    @app.get("/runs/{run_id}", response_model=JobInfo)
    def run_status(run_id: str):
        return _job_or_404(run_id)

    @app.get("/runs/{run_id}/records")
    def run_records(run_id: str):
        info = _job_or_404(run_id)
        path = Path(info["out_dir"]) / "records.jsonl"
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"{run_id} has no records yet")
        rows = [json.loads(line) for line in path.read_text().splitlines() if line]
        return {"run": run_id, "records": rows}

    @app.get("/runs/{run_id}/metrics")
    def run_metrics(run_id: str):
        info = _job_or_404(run_id)
        path = Path(info["out_dir"]) / "metrics.json"
        if not path.exists():
            raise HTTPException(status_code=404, detail=f"{run_id} has no metrics yet")
        return {"run": run_id, "metrics": json.loads(path.read_text())}

    @app.post("/eval")
    def evaluate(req: EvalRequest):
        return _inline("eval", lambda out: experiment.run_eval(req.config, req.checkpoint, out))

    return app
