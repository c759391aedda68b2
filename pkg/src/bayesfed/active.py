"""Federated active learning: entropy-scored acquisition with retraining.

Each client keeps a labeled set and an unlabeled pool over its own rows.
An acquisition round scores every pool input with the current global
predictive model, moves the top-budget inputs (oracle labels attached)
into the labeled set, and reruns federated training. A random-acquisition
control draws from the pool without looking at the model.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import seeds
from .distill import DistillConfig
from .federation import (
    ClientState,
    FederationConfig,
    GlobalModels,
    run_federated,
)
from .metrics import accuracy, entropy_rows
from .models import ModelSpec, predict_proba
from .sgld import SgldConfig

ACQUISITIONS = ("entropy", "random")


@dataclass
class ClientPools:
    """One client's labeled/unlabeled split over its local rows.

    labels holds the oracle's answers for every row; pool rows only ever
    reach the model as features until they are acquired.
    """

    id: int
    features: np.ndarray
    labels: np.ndarray
    labeled_idx: np.ndarray
    pool_idx: np.ndarray
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.labeled_idx = np.sort(np.asarray(self.labeled_idx, dtype=np.int64))
        self.pool_idx = np.sort(np.asarray(self.pool_idx, dtype=np.int64))
        self.check_invariants()
        if len(self.labeled_idx) == 0:
            raise ValueError(f"client {self.id}: needs at least one labeled row")

    def check_invariants(self):
        overlap = np.intersect1d(self.labeled_idx, self.pool_idx)
        if overlap.size:
            raise ValueError(f"client {self.id}: labeled/pool overlap at rows {overlap[:5]}")
        total = len(self.labeled_idx) + len(self.pool_idx)
        union = np.union1d(self.labeled_idx, self.pool_idx)
        if len(union) != total:
            raise ValueError(f"client {self.id}: duplicate indices inside a pool")
        if total and (union[0] < 0 or union[-1] >= self.features.shape[0]):
            raise ValueError(f"client {self.id}: index out of range")

    def pool_features(self) -> np.ndarray:
        return self.features[self.pool_idx]

    def acquire(self, positions: np.ndarray):
        """Move pool rows at the given pool positions into the labeled set."""
        chosen = self.pool_idx[positions]
        keep = np.ones(len(self.pool_idx), dtype=bool)
        keep[positions] = False
        self.labeled_idx = np.sort(np.concatenate([self.labeled_idx, chosen]))
        self.pool_idx = self.pool_idx[keep]
        self.history.append(np.sort(chosen))
        self.check_invariants()

    def as_client_state(self) -> ClientState:
        return ClientState(
            id=self.id,
            features=self.features[self.labeled_idx],
            labels=self.labels[self.labeled_idx],
        )


@dataclass
class ActiveConfig:
    rounds: int
    budget: int
    acquisition: str = "entropy"

    def __post_init__(self):
        if self.rounds < 0:
            raise ValueError(f"active rounds must be >= 0, got {self.rounds}")
        if self.budget < 1:
            raise ValueError(f"budget must be >= 1, got {self.budget}")
        if self.acquisition not in ACQUISITIONS:
            raise ValueError(
                f"acquisition must be one of {ACQUISITIONS}, got {self.acquisition!r}"
            )


def predictive_entropy(p: np.ndarray) -> float:
    """Shannon entropy of one probability row, in nats."""
    return float(entropy_rows(np.asarray(p, dtype=np.float64)[None, :])[0])


def select_batch(scores: np.ndarray, budget: int) -> np.ndarray:
    """Indices of the `budget` highest scores, ties broken by ascending
    index. A budget at or beyond the pool size selects everything."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    order = np.lexsort((np.arange(n), -scores))
    return order[: min(budget, n)]


def _acquire_positions(
    pools: ClientPools,
    acquisition: str,
    budget: int,
    scoring_probs: np.ndarray | None,
    rng: np.random.Generator,
) -> np.ndarray:
    take = min(budget, len(pools.pool_idx))
    if take == 0:
        return np.empty(0, dtype=np.int64)
    if acquisition == "random":
        return np.sort(rng.choice(len(pools.pool_idx), size=take, replace=False))
    return select_batch(entropy_rows(scoring_probs), take)


@dataclass
class ActiveResult:
    curve: list[dict]
    models: GlobalModels
    pools: list[ClientPools]


def run_active_loop(
    pools: list[ClientPools],
    teacher_spec: ModelSpec,
    student_spec: ModelSpec,
    active_cfg: ActiveConfig,
    fed_cfg: FederationConfig,
    sgld_cfg: SgldConfig,
    distill_cfg: DistillConfig,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    seed: int,
    unlabeled: np.ndarray | None = None,
    bins: int = 10,
    threads: int = 1,
    curve_sink=None,
    record_sink=None,
) -> ActiveResult:
    """Train on the initial pools, then alternate acquisition and
    retraining for active_cfg.rounds rounds (stopping early once every
    pool is empty). Emits one curve row per trained model; inner round
    records flow to record_sink.

    The random control consumes its own per-(round, client) streams, so
    its acquisitions never depend on model state; the entropy scorer uses
    the serving model (student for fedppd clients, teacher otherwise).
    """
    ids = [p.id for p in pools]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise ValueError(f"client ids must be unique and ascending, got {ids}")

    def train(stage: int) -> GlobalModels:
        inner_seed = int(seeds.stream(seed, seeds.PURPOSE_ACTIVE, stage).integers(2**63))
        result = run_federated(
            [p.as_client_state() for p in pools],
            teacher_spec,
            student_spec,
            fed_cfg,
            sgld_cfg,
            distill_cfg,
            test_features,
            test_labels,
            seed=inner_seed,
            unlabeled=unlabeled,
            bins=bins,
            threads=threads,
            record_sink=record_sink,
        )
        return result.models

    def serving_probs(models: GlobalModels, X: np.ndarray) -> np.ndarray:
        if fed_cfg.client_mode == "fedppd":
            return predict_proba(student_spec, models.student, X)
        return predict_proba(teacher_spec, models.teacher, X)

    def curve_row(stage: int, models: GlobalModels) -> dict:
        counts = [len(p.labeled_idx) for p in pools]
        probs = serving_probs(models, test_features)
        row = {
            "active_round": stage,
            "labeled_per_client": float(np.mean(counts)),
            "acquisition": active_cfg.acquisition,
            "seed": seed,
            "test_accuracy": accuracy(probs, test_labels),
        }
        if curve_sink is not None:
            curve_sink(row)
        return row

    models = train(0)
    curve = [curve_row(0, models)]

    for a in range(1, active_cfg.rounds + 1):
        if all(len(p.pool_idx) == 0 for p in pools):
            break
        for p in pools:
            scoring = (
                serving_probs(models, p.pool_features())
                if active_cfg.acquisition == "entropy" and len(p.pool_idx)
                else None
            )
            rng = seeds.stream(seed, seeds.PURPOSE_ACTIVE, a, p.id)
            positions = _acquire_positions(p, active_cfg.acquisition, active_cfg.budget, scoring, rng)
            if positions.size:
                p.acquire(positions)
        models = train(a)
        curve.append(curve_row(a, models))

    return ActiveResult(curve, models, pools)


CURVE_FIELDS = ("active_round", "labeled_per_client", "acquisition", "seed", "test_accuracy")


def write_curve_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CURVE_FIELDS)
        for row in rows:
            writer.writerow(
                [
                    row["active_round"],
                    repr(float(row["labeled_per_client"])),
                    row["acquisition"],
                    row["seed"],
                    repr(float(row["test_accuracy"])),
                ]
            )
