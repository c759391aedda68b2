"""Stochastic gradient Langevin dynamics and MAP tracking.

One transition ascends the minibatch-scaled log joint by half a step and
adds Gaussian noise with per-coordinate variance equal to the step size.
With the noise disabled the same code path is plain SGD, which is also
how the fedavg baseline trains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import NumericError


@dataclass
class SgldConfig:
    step_size: float
    decay_kappa: float = 0.0  # 0 keeps the step size constant
    decay_tau: float = 1.0
    burn_in: int = 50
    map_eval_every: int = 0  # 0 means once per local epoch
    minibatch_size: int = 50

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.decay_kappa < 0 or self.decay_tau <= 0:
            raise ValueError("decay_kappa must be >= 0 and decay_tau > 0")
        if self.burn_in < 0:
            raise ValueError(f"burn_in must be >= 0, got {self.burn_in}")
        if self.map_eval_every < 0:
            raise ValueError(f"map_eval_every must be >= 0, got {self.map_eval_every}")
        if self.minibatch_size < 1:
            raise ValueError(f"minibatch_size must be >= 1, got {self.minibatch_size}")

    def step_size_at(self, v: int) -> float:
        """Polynomial decay alpha_v = alpha * (1 + v/tau)^-kappa."""
        if self.decay_kappa == 0.0:
            return self.step_size
        return self.step_size * (1.0 + v / self.decay_tau) ** (-self.decay_kappa)


def sgld_step(
    params: np.ndarray,
    grad_log_joint,
    v: int,
    cfg: SgldConfig,
    rng: np.random.Generator | None,
) -> np.ndarray:
    """One SGLD transition at step index v.

    params' = params + (alpha_v / 2) * grad_log_joint(params) + z with
    z ~ N(0, alpha_v I). rng=None disables the noise, giving one SGD
    ascent step on the same objective.
    """
    alpha = cfg.step_size_at(v)
    g = np.asarray(grad_log_joint(params), dtype=np.float64)
    if g.shape != params.shape:
        raise ValueError(f"gradient shape {g.shape} does not match params {params.shape}")
    if not np.all(np.isfinite(g)):
        raise NumericError(f"sgld step {v}: non-finite gradient")
    out = params + 0.5 * alpha * g
    if rng is not None:
        out = out + rng.normal(0.0, np.sqrt(alpha), size=params.shape)
    if not np.all(np.isfinite(out)):
        raise NumericError(f"sgld step {v}: non-finite parameters")
    return out


@dataclass
class MapTracker:
    """Keeps the highest-density parameter vector seen so far.

    Strict improvement only: on ties the earlier vector wins.
    """

    best_log_joint: float = -np.inf
    best_params: np.ndarray | None = field(default=None)

    def update(self, params: np.ndarray, log_joint_value: float) -> bool:
        if not np.isfinite(log_joint_value):
            raise NumericError(f"map tracker fed non-finite log joint {log_joint_value}")
        if log_joint_value > self.best_log_joint:
            self.best_log_joint = float(log_joint_value)
            self.best_params = np.array(params, dtype=np.float64, copy=True)
            return True
        return False
