"""Online distillation of teacher predictives into a student network.

During local training every fresh posterior sample relabels a perturbed
copy of the current minibatch; the student takes one ascent step on the
soft cross-entropy alignment plus its own Gaussian prior. The teacher
probabilities enter as constants, no gradient flows back through them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape
from .models import ModelSpec, forward_logits, logits_on_tape


@dataclass
class DistillConfig:
    step_size: float  # student ascent rate
    perturb_sigma: float = 0.05
    prior_precision: float = 1e-5

    def __post_init__(self):
        if self.step_size < 0:
            raise ValueError(f"step_size must be >= 0, got {self.step_size}")
        if self.perturb_sigma < 0:
            raise ValueError(f"perturb_sigma must be >= 0, got {self.perturb_sigma}")
        if self.prior_precision < 0:
            raise ValueError(f"prior_precision must be >= 0, got {self.prior_precision}")


def perturb_inputs(X: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian input noise; labels are dropped by construction since only
    features are returned. sigma=0 returns the input unchanged."""
    X = np.asarray(X, dtype=np.float64)
    if sigma == 0.0:
        return X.copy()
    return X + sigma * rng.standard_normal(X.shape)


def alignment_value_and_grad(
    spec: ModelSpec,
    w: np.ndarray,
    teacher_probs: np.ndarray,
    X: np.ndarray,
    prior_precision: float,
) -> tuple[float, np.ndarray]:
    """Objective (1/m) sum_rows sum_c pT log pS(w) - (mu/2)||w||^2 and its
    gradient in w. teacher_probs are constants."""
    m = X.shape[0]
    if m == 0:
        raise ValueError("empty minibatch")
    if teacher_probs.shape != (m, spec.classes):
        raise ValueError(
            f"teacher probs have shape {teacher_probs.shape}, need ({m}, {spec.classes})"
        )
    tape = Tape()
    w_node = tape.leaf(w)
    logits = logits_on_tape(tape, spec, w_node, X)
    align = tape.scale(tape.sum(tape.mul(tape.leaf(teacher_probs), tape.log_softmax(logits))), 1.0 / m)
    if prior_precision != 0.0:
        prior = tape.scale(tape.sum(tape.square(w_node)), -0.5 * prior_precision)
        align = tape.add(align, prior)
    tape.backward(align)
    return float(align.value), tape.grad(w_node)


def student_step(
    spec: ModelSpec,
    w: np.ndarray,
    teacher_probs: np.ndarray,
    X_perturbed: np.ndarray,
    cfg: DistillConfig,
) -> np.ndarray:
    """w' = w + beta * grad(alignment + log prior). beta=0 is the identity."""
    if cfg.step_size == 0.0:
        return np.array(w, copy=True)
    _, g = alignment_value_and_grad(spec, w, teacher_probs, X_perturbed, cfg.prior_precision)
    return w + cfg.step_size * g


def distill_loss(
    spec: ModelSpec,
    w: np.ndarray,
    teacher_prob_sets,
    X: np.ndarray,
) -> float:
    """Average over teachers of the total soft cross-entropy on X.

    -(1/m) sum_i sum_rows sum_c p_i(c|x) log pS(c|x, w) for the m teacher
    predictive sets. Linear in the teacher average: equals the soft
    cross-entropy against the averaged targets.
    """
    teacher_prob_sets = [np.asarray(t, dtype=np.float64) for t in teacher_prob_sets]
    if not teacher_prob_sets:
        raise ValueError("need at least one teacher predictive set")
    z = forward_logits(spec, w, X)
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    total = 0.0
    for t in teacher_prob_sets:
        if t.shape != logp.shape:
            raise ValueError(f"teacher probs have shape {t.shape}, need {logp.shape}")
        total += float(np.sum(np.where(t > 0.0, t * logp, 0.0)))
    return -total / len(teacher_prob_sets)
