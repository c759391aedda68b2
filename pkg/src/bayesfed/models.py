"""MLP classifiers over flat parameter vectors.

A model is a ModelSpec (architecture) plus a flat float64 vector holding
W1, b1, W2, b2, ... in order. The flat vector is the unit of communication
between clients and server, so flatten/unflatten must be exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Node, Tape

ROLES = ("teacher", "student")


class CheckpointError(Exception):
    """Checkpoint file malformed or inconsistent with its spec."""


@dataclass(frozen=True)
class ModelSpec:
    input_dim: int
    hidden: tuple[int, ...]
    classes: int
    role: str = "teacher"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1:
            raise ValueError(f"input_dim must be >= 1, got {self.input_dim}")
        if self.classes < 2:
            raise ValueError(f"classes must be >= 2, got {self.classes}")
        if any(h < 1 for h in self.hidden):
            raise ValueError(f"hidden widths must be >= 1, got {self.hidden}")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        widths = (self.input_dim, *self.hidden, self.classes)
        return [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]

    @property
    def param_count(self) -> int:
        return sum(d_in * d_out + d_out for d_in, d_out in self.layer_dims)


def _check_params(spec: ModelSpec, params: np.ndarray) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise DimensionError(
            f"parameter vector has shape {params.shape}, spec needs ({spec.param_count},)"
        )
    return params


def unflatten(spec: ModelSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    """Split a flat vector into per-layer (W, b) views. No copies."""
    params = _check_params(spec, params)
    layers = []
    off = 0
    for d_in, d_out in spec.layer_dims:
        w = params[off : off + d_in * d_out].reshape(d_in, d_out)
        off += d_in * d_out
        b = params[off : off + d_out]
        off += d_out
        layers.append((w, b))
    return layers


def flatten(layers) -> np.ndarray:
    parts = []
    for w, b in layers:
        parts.append(np.asarray(w, dtype=np.float64).ravel())
        parts.append(np.asarray(b, dtype=np.float64).ravel())
    return np.concatenate(parts)


def init_params(spec: ModelSpec, rng: np.random.Generator) -> np.ndarray:
    """Fan-in scaled uniform weights (Kaiming style), zero biases."""
    parts = []
    for d_in, d_out in spec.layer_dims:
        bound = np.sqrt(6.0 / d_in)
        parts.append(rng.uniform(-bound, bound, size=d_in * d_out))
        parts.append(np.zeros(d_out))
    return np.concatenate(parts)


def _check_features(spec: ModelSpec, X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.input_dim:
        raise DimensionError(f"features have shape {X.shape}, spec needs (n, {spec.input_dim})")
    return X


def forward_logits(spec: ModelSpec, params: np.ndarray, X) -> np.ndarray:
    X = _check_features(spec, X)
    z = X
    layers = unflatten(spec, params)
    for w, b in layers[:-1]:
        z = np.maximum(z @ w + b, 0.0)
    w, b = layers[-1]
    return z @ w + b


def predict_proba(spec: ModelSpec, params: np.ndarray, X) -> np.ndarray:
    z = forward_logits(spec, params, X)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def logits_on_tape(tape: Tape, spec: ModelSpec, theta: Node, X) -> Node:
    X = _check_features(spec, X)
    z = tape.leaf(X)
    off = 0
    n_layers = len(spec.layer_dims)
    for i, (d_in, d_out) in enumerate(spec.layer_dims):
        w = tape.segment(theta, off, (d_in, d_out))
        off += d_in * d_out
        b = tape.segment(theta, off, (d_out,))
        off += d_out
        z = tape.add_bias(tape.matmul(z, w), b)
        if i < n_layers - 1:
            z = tape.relu(z)
    return z


def onehot(labels, classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels outside [0, {classes}): {labels.min()}..{labels.max()}")
    out = np.zeros((labels.shape[0], classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _soft_targets(spec: ModelSpec, y) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        return onehot(y.astype(int), spec.classes)
    if y.ndim == 2 and y.shape[1] == spec.classes:
        return np.asarray(y, dtype=np.float64)
    raise DimensionError(f"targets have shape {y.shape}, spec needs (n,) or (n, {spec.classes})")


def log_joint(
    spec: ModelSpec,
    params: np.ndarray,
    X,
    y,
    prior_precision: float,
    n_total: int | None = None,
) -> float:
    """Unnormalized log posterior density, minibatch scaled.

    -(lam/2) ||theta||^2 + (N/m) * sum_batch log p(y | x, theta), additive
    constants dropped. n_total=None means the batch is the full dataset.
    """
    params = _check_params(spec, params)
    X = _check_features(spec, X)
    m = X.shape[0]
    if m == 0:
        raise ValueError("empty minibatch")
    n_total = m if n_total is None else int(n_total)
    t = _soft_targets(spec, y)
    z = forward_logits(spec, params, X)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loglik = float(np.sum(np.where(t > 0.0, t * logp, 0.0)))
    prior = -0.5 * prior_precision * float(params @ params)
    return prior + (n_total / m) * loglik


def log_joint_grad(
    spec: ModelSpec,
    params: np.ndarray,
    X,
    y,
    prior_precision: float,
    n_total: int | None = None,
) -> tuple[float, np.ndarray]:
    """Value and gradient of log_joint via the tape. Same contract."""
    params = _check_params(spec, params)
    X = _check_features(spec, X)
    m = X.shape[0]
    if m == 0:
        raise ValueError("empty minibatch")
    n_total = m if n_total is None else int(n_total)
    t = _soft_targets(spec, y)

    tape = Tape()
    theta = tape.leaf(params)
    logits = logits_on_tape(tape, spec, theta, X)
    loglik = tape.sum(tape.mul(tape.leaf(t), tape.log_softmax(logits)))
    total = tape.scale(loglik, n_total / m)
    if prior_precision != 0.0:
        prior = tape.scale(tape.sum(tape.square(theta)), -0.5 * prior_precision)
        total = tape.add(total, prior)
    tape.backward(total)
    return float(total.value), tape.grad(theta)


# ---- checkpoint format ---------------------------------------------------

CHECKPOINT_FORMAT = "bayesfed-model"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, spec: ModelSpec, params: np.ndarray) -> None:
    params = _check_params(spec, params)
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": {
            "input_dim": spec.input_dim,
            "hidden": list(spec.hidden),
            "classes": spec.classes,
            "role": spec.role,
        },
        "values": params.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_checkpoint(path) -> tuple[ModelSpec, np.ndarray]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"field 'format' must be {CHECKPOINT_FORMAT!r}")
    spec_doc = doc.get("spec")
    if not isinstance(spec_doc, dict):
        raise CheckpointError("field 'spec' missing or not an object")
    for key in ("input_dim", "hidden", "classes", "role"):
        if key not in spec_doc:
            raise CheckpointError(f"field 'spec.{key}' missing")
    try:
        spec = ModelSpec(
            input_dim=int(spec_doc["input_dim"]),
            hidden=tuple(spec_doc["hidden"]),
            classes=int(spec_doc["classes"]),
            role=str(spec_doc["role"]),
        )
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"field 'spec' invalid: {exc}") from exc
    values = doc.get("values")
    if not isinstance(values, list):
        raise CheckpointError("field 'values' missing or not a list")
    params = np.asarray(values, dtype=np.float64)
    if params.shape != (spec.param_count,):
        raise CheckpointError(
            f"field 'values' has {params.shape[0] if params.ndim == 1 else 'bad'} entries, "
            f"spec needs {spec.param_count}"
        )
    return spec, params
