"""Threaded job registry for service-managed runs.

One worker thread per submitted run; registry state is guarded by a lock
and exposed as plain dicts so the API layer stays stateless.
"""

from __future__ import annotations

import threading
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class Job:
    id: str
    kind: str
    out_dir: str
    state: str = "queued"
    created_at: float = field(default_factory=time.time)
    finished_at: float | None = None
    error: str | None = None
    summary: dict | None = None
    thread: threading.Thread | None = None

    def info(self) -> dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "state": self.state,
            "created_at": self.created_at,
            "finished_at": self.finished_at,
            "out_dir": self.out_dir,
            "error": self.error,
            "summary": self.summary,
        }


class JobRegistry:
    def __init__(self, run_root):
        self.run_root = Path(run_root)
        self.run_root.mkdir(parents=True, exist_ok=True)
        self._jobs: dict[str, Job] = {}
        self._lock = threading.Lock()
        self._counter = 0

    def _next_id(self, kind: str) -> str:
        self._counter += 1
        return f"{kind}-{self._counter:04d}"

    def allocate_dir(self, kind: str) -> Path:
        """Reserve a fresh directory under run_root without tracking a job."""
        with self._lock:
            name = self._next_id(kind)
        return self.run_root / name

    def submit(self, kind: str, work) -> dict:
        """Start `work(out_dir) -> summary` on its own thread."""
        with self._lock:
            job_id = self._next_id(kind)
            out_dir = self.run_root / job_id
            job = Job(id=job_id, kind=kind, out_dir=str(out_dir))
            self._jobs[job_id] = job

        def runner():
            with self._lock:
                job.state = "running"
            try:
                summary = work(out_dir)
            except Exception as exc:  # surfaced via the job record
                with self._lock:
                    job.state = "failed"
                    job.error = f"{type(exc).__name__}: {exc}"
                    job.finished_at = time.time()
                traceback.print_exc()
                return
            with self._lock:
                job.state = "done"
                job.summary = summary
                job.finished_at = time.time()

        job.thread = threading.Thread(target=runner, name=job_id, daemon=True)
        job.thread.start()
        return job.info()

    def get(self, job_id: str) -> dict | None:
        with self._lock:
            job = self._jobs.get(job_id)
            return job.info() if job else None

    def list(self) -> list[dict]:
        with self._lock:
            return [j.info() for j in self._jobs.values()]

    def wait(self, job_id: str, timeout: float | None = None) -> dict | None:
        """Join the worker thread (tests and graceful shutdown)."""
        with self._lock:
            job = self._jobs.get(job_id)
        if job is None:
            return None
        if job.thread is not None:
            job.thread.join(timeout)
        return self.get(job_id)
