"""Config-driven experiment assembly and run-directory artifacts.

Everything the CLI and the service execute lands here: turn a validated
ExperimentConfig into data, run it, and leave a self-contained run
directory behind (resolved config, round records, checkpoints, metrics).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import seeds
from .active import ClientPools, run_active_loop, write_curve_csv
from .config import ExperimentConfig, write_resolved
from .data import (
    Dataset,
    FormatError,
    PartitionPlan,
    client_data,
    evaluation_split,
    gen_synthetic,
    load_mnist,
    make_ood_pair,
    partition,
    read_csv,
    save_plan,
    unlabeled_features,
    write_csv,
)
from .federation import ClientState, run_federated
from .metrics import metrics_report, ood_eval, write_metrics_csv, write_metrics_json
from .models import (
    ModelSpec,
    load_checkpoint,
    predict_proba,
    save_checkpoint,
)


@dataclass
class Provisioned:
    dataset: Dataset
    plan: PartitionPlan
    clients: list[ClientState]
    unlabeled: np.ndarray | None
    test_features: np.ndarray
    test_labels: np.ndarray


def build_pool(cfg: ExperimentConfig) -> tuple[Dataset, Dataset | None]:
    """The partitionable pool plus an optional dedicated test set (MNIST
    ships its own; synthetic/csv carve the test split out of the pool)."""
    ds = cfg.dataset
    if ds.source == "synthetic":
        return gen_synthetic(ds.classes, ds.dim, ds.per_class, ds.spread, cfg.seed), None
    if ds.source == "csv":
        return read_csv(ds.path, classes=ds.classes, provenance=ds.path), None
    train, test = load_mnist(ds.dir or ".")
    return train, test


def provision(cfg: ExperimentConfig) -> Provisioned:
    pool, own_test = build_pool(cfg)
    ds = cfg.dataset
    plan = partition(
        pool,
        ds.clients,
        ds.partition.mode,
        ds.client_size,
        ds.server_unlabeled,
        cfg.seed,
        major=ds.partition.major,
    )
    clients = []
    for k in range(ds.clients):
        X, y = client_data(pool, plan, k)
        clients.append(ClientState(id=k, features=X, labels=y))
    unlabeled = unlabeled_features(pool, plan) if ds.server_unlabeled else None
    if own_test is not None:
        test_X, test_y = own_test.features, own_test.labels
    else:
        test_X, test_y = evaluation_split(pool, plan)
    if test_X.shape[0] == 0:
        raise ValueError(
            "no rows left for the test split; lower client_size/server_unlabeled"
        )
    return Provisioned(pool, plan, clients, unlabeled, test_X, test_y)


def build_specs(cfg: ExperimentConfig, dataset: Dataset) -> tuple[ModelSpec, ModelSpec]:
    dim = dataset.features.shape[1]
    teacher = ModelSpec(dim, cfg.model.teacher_hidden, dataset.classes, role="teacher")
    student = ModelSpec(dim, cfg.model.student_hidden, dataset.classes, role="student")
    return teacher, student


def _prepare_out(cfg: ExperimentConfig, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved(cfg, out / "resolved_config.json")
    return out


def _serving_probs(cfg, teacher_spec, student_spec, models, X):
    if cfg.federation.client_mode == "fedppd":
        return predict_proba(student_spec, models.student, X)
    return predict_proba(teacher_spec, models.teacher, X)


def _write_models(cfg, out, teacher_spec, student_spec, models):
    save_checkpoint(out / "teacher.json", teacher_spec, models.teacher)
    if cfg.federation.client_mode == "fedppd":
        save_checkpoint(out / "student.json", student_spec, models.student)


def run_train(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Federated training per config; artifacts under out_dir:
    resolved_config.json, records.jsonl, teacher.json (+ student.json for
    fedppd clients), metrics.json, metrics.csv."""
    out = _prepare_out(cfg, out_dir)
    prov = provision(cfg)
    teacher_spec, student_spec = build_specs(cfg, prov.dataset)
    with open(out / "records.jsonl", "w") as records_fh:
        result = run_federated(
            prov.clients,
            teacher_spec,
            student_spec,
            cfg.federation.build(),
            cfg.sgld.build(),
            cfg.distill.build(),
            prov.test_features,
            prov.test_labels,
            seed=cfg.seed,
            unlabeled=prov.unlabeled,
            bins=cfg.eval.bins,
            threads=threads,
            record_sink=lambda rec: records_fh.write(json.dumps(rec) + "\n"),
        )
    _write_models(cfg, out, teacher_spec, student_spec, result.models)
    probs = _serving_probs(cfg, teacher_spec, student_spec, result.models, prov.test_features)
    report = metrics_report(probs, prov.test_labels, cfg.eval.bins)
    write_metrics_json(report, out / "metrics.json")
    write_metrics_csv(report, out / "metrics.csv")
    return {
        "out_dir": str(out),
        "rounds": len(result.records),
        "final": result.records[-1]["server"],
        "metrics": {k: v for k, v in report.items() if k != "bins"},
    }


def run_active(cfg: ExperimentConfig, out_dir, threads: int = 1) -> dict:
    """Active-learning loop per config; adds curve.csv to the train
    artifacts. Initial labeled/pool splits are drawn per client from the
    (seed, active, 0, client) stream."""
    out = _prepare_out(cfg, out_dir)
    prov = provision(cfg)
    teacher_spec, student_spec = build_specs(cfg, prov.dataset)
    initial = cfg.active.initial_labeled
    pools = []
    for state in prov.clients:
        if initial >= state.n:
            raise ValueError(
                f"active.initial_labeled={initial} leaves client {state.id} "
                f"no unlabeled pool (local size {state.n})"
            )
        perm = seeds.stream(cfg.seed, seeds.PURPOSE_ACTIVE, 0, state.id).permutation(state.n)
        pools.append(
            ClientPools(
                id=state.id,
                features=state.features,
                labels=state.labels,
                labeled_idx=perm[:initial],
                pool_idx=perm[initial:],
            )
        )
    with open(out / "records.jsonl", "w") as records_fh:
        result = run_active_loop(
            pools,
            teacher_spec,
            student_spec,
            cfg.active.build(),
            cfg.federation.build(),
            cfg.sgld.build(),
            cfg.distill.build(),
            prov.test_features,
            prov.test_labels,
            seed=cfg.seed,
            unlabeled=prov.unlabeled,
            bins=cfg.eval.bins,
            threads=threads,
            record_sink=lambda rec: records_fh.write(json.dumps(rec) + "\n"),
        )
    write_curve_csv(out / "curve.csv", result.curve)
    _write_models(cfg, out, teacher_spec, student_spec, result.models)
    probs = _serving_probs(cfg, teacher_spec, student_spec, result.models, prov.test_features)
    report = metrics_report(probs, prov.test_labels, cfg.eval.bins)
    write_metrics_json(report, out / "metrics.json")
    write_metrics_csv(report, out / "metrics.csv")
    return {
        "out_dir": str(out),
        "curve": result.curve,
        "final_accuracy": result.curve[-1]["test_accuracy"],
    }


def gen_data(cfg: ExperimentConfig, out_dir) -> dict:
    """Materialize the dataset (synthetic/csv) and partition plan as files.
    MNIST keeps its IDX files where they are; only the plan is written."""
    out = _prepare_out(cfg, out_dir)
    prov = provision(cfg)
    paths = {"resolved_config": str(out / "resolved_config.json")}
    if cfg.dataset.source != "mnist":
        write_csv(prov.dataset, out / "dataset.csv")
        paths["dataset"] = str(out / "dataset.csv")
    save_plan(prov.plan, out / "partition.json")
    paths["partition"] = str(out / "partition.json")
    return {
        "out_dir": str(out),
        "rows": int(prov.dataset.features.shape[0]),
        "client_sizes": prov.plan.client_sizes(),
        "unlabeled": int(len(prov.plan.unlabeled_indices)),
        "test": int(len(prov.plan.test_indices)),
        "paths": paths,
    }


def run_eval(cfg: ExperimentConfig, checkpoint_path, out_dir) -> dict:
    """Evaluate a saved checkpoint on the config's test split: report plus
    entropy-based OOD detection per the eval section."""
    spec, params = load_checkpoint(checkpoint_path)
    prov = provision(cfg)
    dim = prov.dataset.features.shape[1]
    if spec.input_dim != dim or spec.classes != prov.dataset.classes:
        raise FormatError(
            f"checkpoint expects input_dim={spec.input_dim}, classes={spec.classes}; "
            f"dataset has input_dim={dim}, classes={prov.dataset.classes}"
        )
    out = _prepare_out(cfg, out_dir)
    probs = predict_proba(spec, params, prov.test_features)
    report = metrics_report(probs, prov.test_labels, cfg.eval.bins)

    test_set = Dataset(
        features=prov.test_features,
        labels=prov.test_labels,
        classes=prov.dataset.classes,
        provenance="eval-split",
    )
    ood_cfg = cfg.eval.ood
    in_X, ood_X = make_ood_pair(
        test_set,
        ood_cfg.strategy,
        offset=ood_cfg.offset,
        held_out=list(ood_cfg.held_out),
    )
    mean, std, values = ood_eval(
        lambda X: predict_proba(spec, params, X),
        in_X,
        ood_X,
        repeats=cfg.eval.repeats,
        rng=seeds.stream(cfg.seed, seeds.PURPOSE_OOD),
    )
    report["ood_auroc_mean"] = mean
    report["ood_auroc_std"] = std
    report["ood"] = {
        "strategy": ood_cfg.strategy,
        "offset": ood_cfg.offset,
        "held_out": list(ood_cfg.held_out),
        "repeats": cfg.eval.repeats,
        "auroc_values": values,
    }
    write_metrics_json(report, out / "metrics.json")
    write_metrics_csv(report, out / "metrics.csv")
    return report
