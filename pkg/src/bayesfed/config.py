"""Experiment configuration: schema, validation, resolution.

Configs are YAML or JSON mappings validated into a strict schema: unknown
keys are rejected (typos fail loudly instead of silently falling back to
defaults) and every default lands in the resolved dump, so a run
directory's resolved_config.json alone reproduces the run.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .active import ActiveConfig
from .distill import DistillConfig
from .federation import FederationConfig, SwaConfig
from .sgld import SgldConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PartitionSection(_Section):
    mode: Literal["iid", "label_skew"] = "label_skew"
    major: int = Field(default=2, ge=1)


class DatasetSection(_Section):
    source: Literal["synthetic", "csv", "mnist"] = "synthetic"
    classes: int = Field(default=4, ge=2)
    dim: int = Field(default=10, ge=1)
    per_class: int = Field(default=4000, ge=1)
    spread: float = Field(default=0.35, gt=0)
    path: str | None = None  # csv source
    dir: str | None = None  # mnist source; None searches the working directory
    clients: int = Field(default=8, ge=1)
    client_size: int = Field(default=500, ge=1)
    server_unlabeled: int = Field(default=1000, ge=0)
    partition: PartitionSection = PartitionSection()

    @model_validator(mode="after")
    def _check_source(self):
        if self.source == "csv" and not self.path:
            raise ValueError("dataset.path is required when source is csv")
        return self


class ModelSection(_Section):
    teacher_hidden: tuple[int, ...] = (64, 32)
    student_hidden: tuple[int, ...] = (128, 64)

    @model_validator(mode="after")
    def _check_widths(self):
        for name, widths in (("teacher_hidden", self.teacher_hidden), ("student_hidden", self.student_hidden)):
            if any(w < 1 for w in widths):
                raise ValueError(f"model.{name} widths must be positive, got {widths}")
        return self


class SgldSection(_Section):
    step_size: float = Field(default=1e-3, gt=0)
    decay_kappa: float = Field(default=0.0, ge=0)
    decay_tau: float = Field(default=1.0, gt=0)
    burn_in: int = Field(default=50, ge=0)
    map_eval_every: int = Field(default=0, ge=0)
    minibatch_size: int = Field(default=50, ge=1)

    def build(self) -> SgldConfig:
        return SgldConfig(**self.model_dump())


class DistillSection(_Section):
    step_size: float = Field(default=0.3, ge=0)
    perturb_sigma: float = Field(default=0.05, ge=0)
    prior_precision: float = Field(default=1e-5, ge=0)

    def build(self) -> DistillConfig:
        return DistillConfig(**self.model_dump())


class SwaSection(_Section):
    epochs: int = Field(default=20, ge=0)
    step_size: float = Field(default=0.05, gt=0)
    start: int = Field(default=0, ge=0)
    every: int = Field(default=1, ge=1)
    batch_size: int = Field(default=64, ge=1)

    def build(self) -> SwaConfig:
        return SwaConfig(**self.model_dump())


class FederationSection(_Section):
    rounds: int = Field(default=20, ge=1)
    local_epochs: int = Field(default=10, ge=0)
    aggregator: Literal["average", "distill"] = "average"
    client_mode: Literal["fedppd", "fedavg"] = "fedppd"
    extra_samples: int = Field(default=10, ge=0)
    teacher_prior: float = Field(default=1e-4, ge=0)
    swa: SwaSection = SwaSection()

    def build(self) -> FederationConfig:
        return FederationConfig(
            rounds=self.rounds,
            local_epochs=self.local_epochs,
            aggregator=self.aggregator,
            client_mode=self.client_mode,
            extra_samples=self.extra_samples,
            teacher_prior=self.teacher_prior,
            swa=self.swa.build(),
        )


class ActiveSection(_Section):
    rounds: int = Field(default=4, ge=0)
    budget: int = Field(default=25, ge=1)
    acquisition: Literal["entropy", "random"] = "entropy"
    initial_labeled: int = Field(default=50, ge=1)

    def build(self) -> ActiveConfig:
        return ActiveConfig(rounds=self.rounds, budget=self.budget, acquisition=self.acquisition)


class OodSection(_Section):
    strategy: Literal["shifted_blobs", "held_out_classes"] = "shifted_blobs"
    offset: float = 3.5  # shift along the last feature axis, in raw data units
    held_out: tuple[int, ...] = ()

    @model_validator(mode="after")
    def _check(self):
        if self.strategy == "held_out_classes" and not self.held_out:
            raise ValueError("eval.ood.held_out is required for the held_out_classes strategy")
        return self


class EvalSection(_Section):
    bins: int = Field(default=10, ge=1)
    repeats: int = Field(default=5, ge=1)
    ood: OodSection = OodSection()


class ExperimentConfig(_Section):
    seed: int = Field(default=0, ge=0)
    dataset: DatasetSection = DatasetSection()
    model: ModelSection = ModelSection()
    sgld: SgldSection = SgldSection()
    distill: DistillSection = DistillSection()
    federation: FederationSection = FederationSection()
    active: ActiveSection = ActiveSection()
    eval: EvalSection = EvalSection()

    @model_validator(mode="after")
    def _cross_checks(self):
        if self.federation.aggregator == "distill" and self.dataset.server_unlabeled < 1:
            raise ValueError(
                "federation.aggregator=distill needs dataset.server_unlabeled >= 1"
            )
        return self

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse and validate a YAML/JSON config file. Raises OSError for
    unreadable paths and pydantic.ValidationError for schema violations."""
    text = Path(path).read_text()
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ValueError(f"{path}: not valid YAML/JSON: {exc}") from exc
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a mapping, got {type(raw).__name__}")
    return ExperimentConfig.model_validate(raw)


def write_resolved(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.resolved(), indent=2, sort_keys=True) + "\n")
