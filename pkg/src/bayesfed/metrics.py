"""Accuracy, calibration, Brier score, AUROC and OOD evaluation.

Calibration bins are 10 equal-width confidence intervals over (0, 1];
confidence is the top predicted probability. AUROC uses the pairwise
Mann-Whitney formulation with ties counted as half.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


@dataclass
class BinStats:
    lo: float
    hi: float
    count: int
    mean_conf: float
    mean_acc: float


def _check_batch(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2:
        raise ValueError(f"probs must be (n, classes), got shape {probs.shape}")
    if labels.shape != (probs.shape[0],):
        raise ValueError(f"labels shape {labels.shape} does not match {probs.shape[0]} rows")
    if probs.shape[0] == 0:
        raise ValueError("empty evaluation batch")
    return probs, labels


def accuracy(probs, labels) -> float:
    """Argmax accuracy; ties resolve to the lowest class index."""
    probs, labels = _check_batch(probs, labels)
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def ece_mce(probs, labels, bins: int = 10) -> tuple[float, float, list[BinStats]]:
    """Expected and maximum calibration error over equal-width bins.

    Returns (ece, mce, per-bin stats). MCE is the worst gap over nonempty
    bins; with a single nonempty bin ece and mce coincide by construction.
    """
    probs, labels = _check_batch(probs, labels)
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    conf = probs.max(axis=1)
    correct = (np.argmax(probs, axis=1) == labels).astype(np.float64)
    # bin b covers (b/bins, (b+1)/bins]
    idx = np.clip(np.ceil(conf * bins).astype(int) - 1, 0, bins - 1)
    n = probs.shape[0]
    stats = []
    ece = 0.0
    mce = 0.0
    for b in range(bins):
        mask = idx == b
        count = int(mask.sum())
        if count == 0:
            stats.append(BinStats(b / bins, (b + 1) / bins, 0, 0.0, 0.0))
            continue
        mean_conf = float(np.mean(conf[mask]))
        mean_acc = float(np.mean(correct[mask]))
        gap = abs(mean_acc - mean_conf)
        ece += (count / n) * gap
        mce = max(mce, gap)
        stats.append(BinStats(b / bins, (b + 1) / bins, count, mean_conf, mean_acc))
    return ece, mce, stats


def brier(probs, labels) -> float:
    """Mean squared distance between the predictive and the one-hot label."""
    probs, labels = _check_batch(probs, labels)
    onehot = np.zeros_like(probs)
    onehot[np.arange(probs.shape[0]), labels] = 1.0
    return float(np.mean(np.sum((probs - onehot) ** 2, axis=1)))


def auroc(pos_scores, neg_scores) -> float:
    """P(pos > neg) + 0.5 P(pos = neg) over all pairs."""
    pos = np.asarray(pos_scores, dtype=np.float64).ravel()
    neg = np.asarray(neg_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auroc undefined: a score set is empty")
    wins = (pos[:, None] > neg[None, :]).sum()
    ties = (pos[:, None] == neg[None, :]).sum()
    return float((wins + 0.5 * ties) / (pos.size * neg.size))


def entropy_rows(probs) -> np.ndarray:
    """Predictive entropy in nats per row, 0 log 0 taken as 0."""
    probs = np.asarray(probs, dtype=np.float64)
    p = probs.reshape(1, -1) if probs.ndim == 1 else probs
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0.0, p * np.log(p), 0.0)
    out = -terms.sum(axis=1)
    return out[0] if probs.ndim == 1 else out


def ood_eval(
    predict,
    in_features: np.ndarray,
    ood_features: np.ndarray,
    repeats: int,
    rng: np.random.Generator,
) -> tuple[float, float, list[float]]:
    """Entropy-score OOD detection, OOD as the positive class.

    Each repeat subsamples an equal number of rows from both sides without
    replacement, scores them with the predictive entropy of `predict`, and
    computes AUROC. Returns (mean, std, per-repeat values); std is the
    population std over repeats.
    """
    if repeats < 1:
        raise ValueError(f"repeats must be >= 1, got {repeats}")
    n = min(len(in_features), len(ood_features))
    if n == 0:
        raise ValueError("ood_eval needs non-empty feature sets on both sides")
    values = []
    for _ in range(repeats):
        in_take = rng.choice(len(in_features), size=n, replace=False)
        ood_take = rng.choice(len(ood_features), size=n, replace=False)
        h_in = entropy_rows(predict(in_features[in_take]))
        h_ood = entropy_rows(predict(ood_features[ood_take]))
        values.append(auroc(h_ood, h_in))
    arr = np.asarray(values)
    return float(arr.mean()), float(arr.std()), values


def correctness_auroc(probs, labels) -> float | None:
    """How well low entropy predicts a correct argmax. None when the batch
    is all-correct or all-wrong, where the value is undefined."""
    probs, labels = _check_batch(probs, labels)
    correct = np.argmax(probs, axis=1) == labels
    if correct.all() or not correct.any():
        return None
    scores = -entropy_rows(probs)
    return auroc(scores[correct], scores[~correct])


# ---- report formats ------------------------------------------------------


def metrics_report(probs, labels, bins: int = 10) -> dict:
    ece, mce, stats = ece_mce(probs, labels, bins)
    c_auroc = correctness_auroc(probs, labels)
    return {
        "n": int(np.asarray(labels).shape[0]),
        "accuracy": accuracy(probs, labels),
        "ece": ece,
        "mce": mce,
        "brier": brier(probs, labels),
        "mean_entropy": float(np.mean(entropy_rows(probs))),
        "correctness_auroc": c_auroc,
        "bins": [
            {
                "lo": s.lo,
                "hi": s.hi,
                "count": s.count,
                "mean_conf": s.mean_conf,
                "mean_acc": s.mean_acc,
            }
            for s in stats
        ],
    }


def write_metrics_json(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")


def write_metrics_csv(report: dict, path) -> None:
    """Flat metric,value rows; floats keep full precision via repr.
    Nested structures (bin tables, raw value lists) stay JSON-only."""
    core = ("n", "accuracy", "ece", "mce", "brier", "mean_entropy", "correctness_auroc")
    extra = [k for k in report if k not in core and not isinstance(report[k], (dict, list))]
    with open(path, "w") as fh:
        fh.write("metric,value\n")
        for key in (*core, *sorted(extra)):
            if key not in report:
                continue
            v = report[key]
            if isinstance(v, float):
                fh.write(f"{key},{v!r}\n")
            else:
                fh.write(f"{key},{'' if v is None else v}\n")
