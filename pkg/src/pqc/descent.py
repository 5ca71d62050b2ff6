"""Full-batch ADAM descent of replica points down the potential."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .potential import PotentialField

log = logging.getLogger(__name__)


class DescentError(RuntimeError):
    pass


@dataclass(frozen=True)
class DescentConfig:
    learning_rate: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon_adam: float = 1e-8
    max_iterations: int = 2000
    eps_y: float = 1e-3
    eps_V: float = 1e-3
    amsgrad: bool = True
    lr_decay: float = 0.0
    patience: int = 5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if not self.epsilon_adam > 0:
            raise ValueError("epsilon_adam must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        if not (self.eps_y > 0 and self.eps_V > 0):
            raise ValueError("eps_y and eps_V must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")


@dataclass(frozen=True, eq=False)
class DescentResult:
    final_points: np.ndarray
    final_potentials: np.ndarray
    initial_potentials: np.ndarray
    iterations_used: int
    converged: bool
    last_max_step: float
    last_max_dV: float


def descend(field: PotentialField, data, config: DescentConfig = DescentConfig(),
            trajectory=None) -> DescentResult:
    """Move a replica of every observation downhill until both the step and
    the potential change of every replica stay below their thresholds for
    ``config.patience`` consecutive iterations.

    ``trajectory`` may be a callable ``(iteration, Y, V)`` invoked after every
    update, e.g. to dump diagnostics.
    """
    X = np.atleast_2d(np.asarray(getattr(data, "X", data), dtype=float))
    Y = X.copy()
    V, G = field.values_and_gradients(Y)
    V0 = V.copy()
    m = np.zeros_like(Y)
    v = np.zeros_like(Y)
    v_hat = np.zeros_like(Y)
    b1, b2 = config.beta1, config.beta2
    max_step = max_dV = np.inf
    converged = False
    calm = 0
    it = 0
    if trajectory is not None:
        trajectory(0, Y, V)
    while it < config.max_iterations:
        if not np.all(np.isfinite(G)):
            bad = int(np.flatnonzero(~np.isfinite(G).all(axis=1))[0])
            raise DescentError(f"non-finite gradient at replica {bad}, iteration {it}")
        it += 1
        m = b1 * m + (1 - b1) * G
        v = b2 * v + (1 - b2) * G * G
        v_hat = np.maximum(v_hat, v / (1 - b2 ** it)) if config.amsgrad else v / (1 - b2 ** it)
        lr = config.learning_rate / (1.0 + config.lr_decay * (it - 1))
        step = (lr / (1 - b1 ** it)) * m / (np.sqrt(v_hat) + config.epsilon_adam)
        Y = Y - step
        V_new, G = field.values_and_gradients(Y)
        max_step = float(np.sqrt((step * step).sum(axis=1)).max())
        max_dV = float(np.abs(V_new - V).max())
        V = V_new
        if trajectory is not None:
            trajectory(it, Y, V)
        # momentum reverses through zero at every overshoot, so a single quiet
        # iteration is not enough to call the replicas settled
        calm = calm + 1 if max_step <= config.eps_y and max_dV <= config.eps_V else 0
        if calm >= config.patience:
            converged = True
            break
    if not converged:
        log.warning("descent stopped after %d iterations without converging "
                    "(max step %.3g, max dV %.3g)", it, max_step, max_dV)
    return DescentResult(final_points=Y, final_potentials=V, initial_potentials=V0,
                         iterations_used=it, converged=converged,
                         last_max_step=max_step, last_max_dV=max_dV)


def default_energy_threshold(result: DescentResult, config: DescentConfig) -> float:
    """Lowest merge threshold consistent with the descent precision."""
    last = result.last_max_dV if np.isfinite(result.last_max_dV) else 0.0
    return max(config.eps_V, last)
