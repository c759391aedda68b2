"""Federated rounds: local updates, server aggregation, run records.

One round broadcasts the global teacher and student, runs every client's
local update on its own derived random stream, then reduces the returned
models in ascending client id order. Reduction order and per-(client,
round) streams make results independent of thread count.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import seeds
from .autodiff import NumericError
from .distill import DistillConfig, alignment_value_and_grad, perturb_inputs, student_step
from .metrics import brier as brier_score
from .metrics import accuracy, ece_mce
from .models import ModelSpec, log_joint, log_joint_grad, predict_proba
from .sgld import MapTracker, SgldConfig, sgld_step


class ProtocolError(Exception):
    """A client/server exchange violated the protocol contract."""


@dataclass
class ClientState:
    id: int
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] == 0:
            raise ValueError(f"client {self.id}: empty local dataset")
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError(f"client {self.id}: {self.features.shape[0]} rows vs {self.labels.shape[0]} labels")

    @property
    def n(self) -> int:
        return self.features.shape[0]


@dataclass
class GlobalModels:
    teacher: np.ndarray
    student: np.ndarray
    round_index: int = 0


@dataclass
class SwaConfig:
    epochs: int = 20
    step_size: float = 0.05
    start: int = 0  # 0 means ceil(epochs / 2)
    every: int = 1
    batch_size: int = 64

    def __post_init__(self):
        if self.epochs < 0 or self.start < 0 or self.every < 1 or self.batch_size < 1:
            raise ValueError(f"bad swa config: {self}")
        if self.step_size <= 0:
            raise ValueError(f"swa step_size must be positive, got {self.step_size}")

    def start_epoch(self) -> int:
        return self.start if self.start > 0 else int(np.ceil(self.epochs / 2))


AGGREGATORS = ("average", "distill")
CLIENT_MODES = ("fedppd", "fedavg")


@dataclass
class FederationConfig:
    rounds: int
    local_epochs: int
    aggregator: str = "average"
    client_mode: str = "fedppd"
    teacher_prior: float = 1e-4
    extra_samples: int = 10  # gaussian draws added to the distill ensemble
    swa: SwaConfig = field(default_factory=SwaConfig)

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError(f"rounds must be >= 1, got {self.rounds}")
        if self.local_epochs < 0:
            raise ValueError(f"local_epochs must be >= 0, got {self.local_epochs}")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"aggregator must be one of {AGGREGATORS}, got {self.aggregator!r}")
        if self.client_mode not in CLIENT_MODES:
            raise ValueError(f"client_mode must be one of {CLIENT_MODES}, got {self.client_mode!r}")
        if self.teacher_prior < 0:
            raise ValueError(f"teacher_prior must be >= 0, got {self.teacher_prior}")
        if self.extra_samples < 0:
            raise ValueError(f"extra_samples must be >= 0, got {self.extra_samples}")


@dataclass
class ClientUpdateResult:
    teacher: np.ndarray
    student: np.ndarray | None
    n: int
    map_log_joint: float
    local_epochs: int


def _check_length(params, spec: ModelSpec, who: str):
    if params.shape != (spec.param_count,):
        raise ProtocolError(
            f"{who}: parameter vector length {params.shape} does not match spec ({spec.param_count},)"
        )


def client_update(
    state: ClientState,
    globals_: GlobalModels,
    teacher_spec: ModelSpec,
    student_spec: ModelSpec,
    local_epochs: int,
    sgld_cfg: SgldConfig,
    distill_cfg: DistillConfig,
    teacher_prior: float,
    rng: np.random.Generator,
    mode: str = "fedppd",
    sample_hook=None,
) -> ClientUpdateResult:
    """One client's local pass.

    fedppd interleaves SGLD teacher sampling with online student
    distillation on perturbed minibatches and returns the tracked MAP
    teacher. fedavg runs the same loop without noise or student and
    returns the final iterate. sample_hook, if given, receives every
    post burn-in teacher sample (test instrumentation).
    """
    if mode not in CLIENT_MODES:
        raise ValueError(f"mode must be one of {CLIENT_MODES}, got {mode!r}")
    _check_length(globals_.teacher, teacher_spec, f"client {state.id} teacher")
    _check_length(globals_.student, student_spec, f"client {state.id} student")

    theta = globals_.teacher.copy()
    w = globals_.student.copy()
    n_k = state.n
    bpe = int(np.ceil(n_k / sgld_cfg.minibatch_size))
    total_steps = local_epochs * bpe
    map_every = sgld_cfg.map_eval_every if sgld_cfg.map_eval_every > 0 else bpe

    def full_log_joint(params):
        return log_joint(teacher_spec, params, state.features, state.labels, teacher_prior)

    tracker = MapTracker()
    if mode == "fedppd":
        tracker.update(theta, full_log_joint(theta))

    v = 0
    for _ in range(local_epochs):
        order = rng.permutation(n_k)
        for b in range(bpe):
            batch = order[b * sgld_cfg.minibatch_size : (b + 1) * sgld_cfg.minibatch_size]
            xb = state.features[batch]
            yb = state.labels[batch]

            def grad_fn(params):
                return log_joint_grad(teacher_spec, params, xb, yb, teacher_prior, n_total=n_k)[1]

            try:
                theta = sgld_step(theta, grad_fn, v, sgld_cfg, rng if mode == "fedppd" else None)
            except NumericError as exc:
                raise NumericError(f"client {state.id}: {exc}") from exc
            tau = v + 1
            if mode == "fedppd":
                if tau > sgld_cfg.burn_in and (tau % map_every == 0 or tau == total_steps):
                    tracker.update(theta, full_log_joint(theta))
                if tau > sgld_cfg.burn_in:
                    if sample_hook is not None:
                        sample_hook(theta)
                    xp = perturb_inputs(xb, distill_cfg.perturb_sigma, rng)
                    soft = predict_proba(teacher_spec, theta, xp)
                    w = student_step(student_spec, w, soft, xp, distill_cfg)
            v += 1

    if mode == "fedavg":
        return ClientUpdateResult(theta, None, n_k, full_log_joint(theta), local_epochs)
    return ClientUpdateResult(
        tracker.best_params, w, n_k, tracker.best_log_joint, local_epochs
    )


# ---- aggregation ---------------------------------------------------------


def aggregate_average(models: list[np.ndarray], weights: list[int]) -> np.ndarray:
    """Dataset-size weighted mean, accumulated in the order given (callers
    pass ascending client id). Bitwise-identical inputs short-circuit to a
    copy so averaging K copies of a model returns that model exactly."""
    if not models or len(models) != len(weights):
        raise ValueError(f"need one weight per model, got {len(models)} / {len(weights)}")
    if any(w <= 0 for w in weights):
        raise ValueError(f"weights must be positive, got {list(weights)}")
    first = models[0]
    if any(m.shape != first.shape for m in models):
        raise ProtocolError("aggregation over mismatched parameter lengths")
    if all(np.array_equal(m, first) for m in models[1:]):
        return first.copy()
    total = float(sum(weights))
    acc = weights[0] * first
    for m, wt in zip(models[1:], weights[1:]):
        acc = acc + wt * m
    return acc / total


def fit_param_gaussian(
    models: list[np.ndarray], weights: list[int]
) -> tuple[np.ndarray, np.ndarray]:
    """Coordinatewise weighted mean and population std over client models."""
    mean = aggregate_average(models, weights)
    total = float(sum(weights))
    acc = weights[0] * (models[0] - mean) ** 2
    for m, wt in zip(models[1:], weights[1:]):
        acc = acc + wt * (m - mean) ** 2
    return mean, np.sqrt(acc / total)


def build_ensemble(
    mean: np.ndarray,
    std: np.ndarray,
    client_models: list[np.ndarray],
    extra_samples: int,
    rng: np.random.Generator,
) -> list[np.ndarray]:
    """Gaussian draws, then the mean, then every client model."""
    members = [mean + std * rng.standard_normal(mean.shape) for _ in range(extra_samples)]
    members.append(mean.copy())
    members.extend(m.copy() for m in client_models)
    return members


def pseudo_label(spec: ModelSpec, ensemble: list[np.ndarray], X: np.ndarray) -> np.ndarray:
    """Ensemble-averaged softmax targets on X."""
    if not ensemble:
        raise ValueError("empty ensemble")
    acc = predict_proba(spec, ensemble[0], X)
    for member in ensemble[1:]:
        acc = acc + predict_proba(spec, member, X)
    return acc / len(ensemble)


def swa_distill(
    spec: ModelSpec,
    init: np.ndarray,
    X: np.ndarray,
    targets: np.ndarray,
    cfg: SwaConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """SGD on mean soft cross-entropy from init, averaging the end-of-epoch
    weights from cfg.start_epoch() on. No snapshots returns init."""
    w = init.copy()
    n = X.shape[0]
    if cfg.epochs == 0:
        return w
    if n == 0:
        raise ValueError("swa distillation needs a non-empty input set")
    start = cfg.start_epoch()
    swa_avg = None
    count = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        for b in range(int(np.ceil(n / cfg.batch_size))):
            batch = order[b * cfg.batch_size : (b + 1) * cfg.batch_size]
            _, g = alignment_value_and_grad(spec, w, targets[batch], X[batch], 0.0)
            w = w + cfg.step_size * g
        if epoch >= start and (epoch - start) % cfg.every == 0:
            if swa_avg is None:
                swa_avg = w.copy()
                count = 1
            else:
                count += 1
                swa_avg = swa_avg * ((count - 1) / count) + w * (1.0 / count)
    return init.copy() if swa_avg is None else swa_avg


def aggregate_distill(
    spec: ModelSpec,
    models: list[np.ndarray],
    weights: list[int],
    X_unlabeled: np.ndarray,
    extra_samples: int,
    swa_cfg: SwaConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Gaussian-ensemble pseudo-labeling plus SWA distillation.

    Fits a diagonal Gaussian over the client models, pseudo-labels the
    server's unlabeled pool with the sample/mean/client ensemble, then
    distills into one network initialized at the Gaussian mean.
    """
    if X_unlabeled is None or len(X_unlabeled) == 0:
        raise ValueError("distill aggregation needs a non-empty unlabeled pool")
    mean, std = fit_param_gaussian(models, weights)
    if extra_samples == 0 and swa_cfg.epochs == 0:
        # degenerate setting collapses to the weighted average exactly
        return mean
    ensemble = build_ensemble(mean, std, models, extra_samples, rng)
    targets = pseudo_label(spec, ensemble, X_unlabeled)
    return swa_distill(spec, mean, X_unlabeled, targets, swa_cfg, rng)


def ensemble_predictive(
    spec: ModelSpec,
    models: list[np.ndarray],
    weights: list[int],
    extra_samples: int,
    rng: np.random.Generator,
):
    """Posterior-predictive callable over the client-sample ensemble.

    Averages member softmax outputs exactly as the distill aggregator's
    pseudo-labeler does; disagreement between samples is what carries
    predictive uncertainty off the data manifold.
    """
    mean, std = fit_param_gaussian(models, weights)
    members = build_ensemble(mean, std, models, extra_samples, rng)

    def predict(X: np.ndarray) -> np.ndarray:
        return pseudo_label(spec, members, X)

    return predict


# ---- orchestration -------------------------------------------------------


@dataclass
class FederationResult:
    models: GlobalModels
    records: list[dict]
    # final round's client returns; posterior samples for ensemble scoring
    final_clients: list[ClientUpdateResult] = field(default_factory=list)


def _evaluate_round(
    r: int,
    fed_cfg: FederationConfig,
    teacher_spec: ModelSpec,
    student_spec: ModelSpec,
    models: GlobalModels,
    client_ids: list[int],
    results: list[ClientUpdateResult],
    test_features: np.ndarray,
    test_labels: np.ndarray,
    bins: int,
    wall_ms: float,
) -> dict:
    teacher_probs = predict_proba(teacher_spec, models.teacher, test_features)
    acc_teacher = accuracy(teacher_probs, test_labels)
    if fed_cfg.client_mode == "fedppd":
        student_probs = predict_proba(student_spec, models.student, test_features)
        acc_student = accuracy(student_probs, test_labels)
        serving = student_probs
    else:
        acc_student = None
        serving = teacher_probs
    ece, _, _ = ece_mce(serving, test_labels, bins)
    return {
        "round": r,
        "per_client": [
            {
                "id": cid,
                "n": res.n,
                "map_log_joint": res.map_log_joint,
                "local_epochs": res.local_epochs,
            }
            for cid, res in zip(client_ids, results)
        ],
        "server": {
            "aggregator": fed_cfg.aggregator,
            "test_acc_teacher": acc_teacher,
            "test_acc_student": acc_student,
            "ece": ece,
            "brier": brier_score(serving, test_labels),
        },
        "wall_ms": wall_ms,
    }


def run_federated(
    clients: list[ClientState],
    teacher_spec: ModelSpec,
    student_spec: ModelSpec,
    fed_cfg: FederationConfig,
    sgld_cfg: SgldConfig,
    distill_cfg: DistillConfig,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    seed: int,
    unlabeled: np.ndarray | None = None,
    bins: int = 10,
    threads: int = 1,
    record_sink=None,
    sample_hook=None,
) -> FederationResult:
    """Run the full protocol for fed_cfg.rounds rounds.

    Results are bitwise reproducible for a given seed regardless of
    `threads`: every client/round pair draws from its own derived stream
    and reduction always walks clients in ascending id order.
    """
    if not clients:
        raise ValueError("need at least one client")
    ids = [c.id for c in clients]
    if ids != sorted(ids) or len(set(ids)) != len(ids):
        raise ProtocolError(f"client ids must be unique and ascending, got {ids}")
    if fed_cfg.aggregator == "distill" and (unlabeled is None or len(unlabeled) == 0):
        raise ValueError("distill aggregator needs a non-empty server unlabeled pool")

    models = GlobalModels(
        teacher=init_global(teacher_spec, seed, seeds.PURPOSE_TEACHER_INIT),
        student=init_global(student_spec, seed, seeds.PURPOSE_STUDENT_INIT),
        round_index=0,
    )
    records: list[dict] = []

    for r in range(1, fed_cfg.rounds + 1):
        t0 = time.perf_counter()
        for vec, who in ((models.teacher, "teacher"), (models.student, "student")):
            if not np.all(np.isfinite(vec)):
                raise NumericError(f"round {r}: global {who} has non-finite parameters")

        def one(client: ClientState) -> ClientUpdateResult:
            rng = seeds.stream(seed, seeds.PURPOSE_CLIENT, client.id, r)
            return client_update(
                client,
                models,
                teacher_spec,
                student_spec,
                fed_cfg.local_epochs,
                sgld_cfg,
                distill_cfg,
                fed_cfg.teacher_prior,
                rng,
                mode=fed_cfg.client_mode,
                sample_hook=sample_hook,
            )

        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                results = list(pool.map(one, clients))
        else:
            results = [one(c) for c in clients]

        teachers = [res.teacher for res in results]
        weights = [res.n for res in results]
        if fed_cfg.aggregator == "average":
            new_teacher = aggregate_average(teachers, weights)
            new_student = (
                aggregate_average([res.student for res in results], weights)
                if fed_cfg.client_mode == "fedppd"
                else models.student
            )
        else:
            rng_t = seeds.stream(seed, seeds.PURPOSE_SERVER, r, 0)
            new_teacher = aggregate_distill(
                teacher_spec, teachers, weights, unlabeled, fed_cfg.extra_samples, fed_cfg.swa, rng_t
            )
            if fed_cfg.client_mode == "fedppd":
                rng_s = seeds.stream(seed, seeds.PURPOSE_SERVER, r, 1)
                new_student = aggregate_distill(
                    student_spec,
                    [res.student for res in results],
                    weights,
                    unlabeled,
                    fed_cfg.extra_samples,
                    fed_cfg.swa,
                    rng_s,
                )
            else:
                new_student = models.student
        models = GlobalModels(new_teacher, new_student, round_index=r)

        wall_ms = (time.perf_counter() - t0) * 1000.0
        record = _evaluate_round(
            r,
            fed_cfg,
            teacher_spec,
            student_spec,
            models,
            ids,
            results,
            test_features,
            test_labels,
            bins,
            wall_ms,
        )
        records.append(record)
        if record_sink is not None:
            record_sink(record)

    return FederationResult(models, records, final_clients=results)


def init_global(spec: ModelSpec, seed: int, purpose: int) -> np.ndarray:
    from .models import init_params

    return init_params(spec, seeds.stream(seed, purpose))


def write_record_line(fh, record: dict) -> None:
    fh.write(json.dumps(record) + "\n")
