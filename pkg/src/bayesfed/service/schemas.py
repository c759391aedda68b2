"""Request/response bodies for the HTTP service."""

from __future__ import annotations

from pydantic import BaseModel, ConfigDict, Field

from ..config import ExperimentConfig


class RunRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ExperimentConfig
    threads: int = Field(default=1, ge=1, le=64)


class DatasetRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ExperimentConfig


class EvalRequest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    config: ExperimentConfig
    checkpoint: str


class JobInfo(BaseModel):
    id: str
    kind: str
    state: str  # queued | running | done | failed
    created_at: float
    finished_at: float | None = None
    out_dir: str
    error: str | None = None
    summary: dict | None = None


class JobList(BaseModel):
    runs: list[JobInfo]


class Health(BaseModel):
    status: str
    version: str
