"""Bayesian cluster membership built on the normalised kernel mixture.

Each cluster owns the kernels of its member observations; with uniform
kernel weight 1/n this gives the joint P(k, x), the prior #k/n, the
posterior P(k|x) and the likelihood P(x|k).  Everything is computed from
the (points x kernels) matrix of log kernel densities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .kernel import KernelModel, log_components


class ProbModelError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class ProbabilisticModel:
    kernel_model: KernelModel
    cluster_members: tuple

    def __post_init__(self):
        if not self.kernel_model.normalized:
            raise ProbModelError(
                "the probabilistic layer needs normalised kernels; the global-sigma "
                "variant is unnormalised")
        members = tuple(np.asarray(s, dtype=int) for s in self.cluster_members)
        flat = np.concatenate(members) if members else np.zeros(0, dtype=int)
        if np.sort(flat).tolist() != list(range(self.kernel_model.n)):
            raise ProbModelError("cluster members must partition the kernel indices")
        object.__setattr__(self, "cluster_members", members)
        owner = np.empty(self.kernel_model.n, dtype=int)
        for c, s in enumerate(members):
            owner[s] = c
        object.__setattr__(self, "owner", owner)

    @property
    def k(self) -> int:
        return len(self.cluster_members)

    @property
    def n(self) -> int:
        return self.kernel_model.n

    @property
    def priors(self) -> np.ndarray:
        return np.array([len(s) for s in self.cluster_members], dtype=float) / self.n

    @classmethod
    def from_assignment(cls, kernel_model, assignment):
        assignment = np.asarray(assignment, dtype=int)
        k = int(assignment.max()) + 1
        return cls(kernel_model, tuple(np.flatnonzero(assignment == c) for c in range(k)))

    def log_joint_from_components(self, L) -> np.ndarray:
        """Group a (m, n) matrix of log psi_i into (m, k) log P(k, x)."""
        out = np.empty((L.shape[0], self.k))
        for c, s in enumerate(self.cluster_members):
            out[:, c] = logsumexp(L[:, s], axis=1)
        return out - math.log(self.n)

    def log_joint(self, X) -> np.ndarray:
        return self.log_joint_from_components(log_components(self.kernel_model, X))


def _points(x):
    return np.atleast_2d(np.asarray(x, dtype=float))


def joint(model: ProbabilisticModel, k: int, x) -> float:
    return float(np.exp(model.log_joint(_points(x))[0, k]))


def prior(model: ProbabilisticModel, k: int) -> float:
    return len(model.cluster_members[k]) / model.n


def log_posterior(model: ProbabilisticModel, X=None, *, log_joint=None) -> np.ndarray:
    lj = model.log_joint(_points(X)) if log_joint is None else log_joint
    return lj - logsumexp(lj, axis=1, keepdims=True)


def posterior(model: ProbabilisticModel, x) -> np.ndarray:
    """P(k|x) for each cluster; a (k,) vector for one point, (m, k) for many."""
    P = np.exp(log_posterior(model, x))
    return P[0] if np.ndim(x) == 1 else P


def log_likelihood(model: ProbabilisticModel, X=None, *, log_joint=None) -> np.ndarray:
    lj = model.log_joint(_points(X)) if log_joint is None else log_joint
    return lj - np.log(model.priors)


def likelihood(model: ProbabilisticModel, x, k: int) -> float:
    return float(np.exp(log_likelihood(model, x)[0, k]))


@dataclass(frozen=True, eq=False)
class Allocation:
    assignment: np.ndarray          # ids in the model's cluster numbering
    winner_posterior: np.ndarray
    log_winner_posterior: np.ndarray
    empty_clusters: tuple
    remap: dict                     # model id -> compact id over non-empty clusters

    @property
    def k_effective(self) -> int:
        return len(self.remap)

    @property
    def compact(self) -> np.ndarray:
        return np.array([self.remap[c] for c in self.assignment], dtype=int)


def allocate(model: ProbabilisticModel, X=None, *, log_joint=None) -> Allocation:
    """Assign each point to its maximum-posterior cluster (ties -> lower id)."""
    lp = log_posterior(model, X, log_joint=log_joint)
    win = np.argmax(lp, axis=1)
    lw = lp[np.arange(lp.shape[0]), win]
    used = sorted(set(win.tolist()))
    return Allocation(assignment=win, winner_posterior=np.exp(lw), log_winner_posterior=lw,
                      empty_clusters=tuple(c for c in range(model.k) if c not in used),
                      remap={c: i for i, c in enumerate(used)})


def outlier_scores(model: ProbabilisticModel, X=None, *, log_joint=None) -> np.ndarray:
    """max_k P(x|k) per point."""
    return np.exp(log_likelihood(model, X, log_joint=log_joint).max(axis=1))


def quantile_threshold(scores, q: float) -> float:
    """Score cut such that exactly ceil(q*n) of ``scores`` fall below it.

    Ties at the cut are resolved by index in :func:`outlier_flags`.
    """
    if not 0 <= q <= 1:
        raise ProbModelError(f"quantile must lie in [0, 1], got {q}")
    scores = np.asarray(scores, dtype=float)
    n_flag = math.ceil(q * scores.size)
    if n_flag == 0:
        return -np.inf
    return float(np.sort(scores, kind="stable")[n_flag - 1])


def outlier_flags(model: ProbabilisticModel, X=None, threshold=None, quantile: float = None,
                  *, log_joint=None):
    """Flag points whose best class-conditional density is below a threshold.

    Give either an absolute density ``threshold`` or a ``quantile`` of the
    scores of the supplied points (then exactly ceil(q*m) points are flagged,
    lowest scores first, ties by index).
    """
    scores = outlier_scores(model, X, log_joint=log_joint)
    if (threshold is None) == (quantile is None):
        raise ProbModelError("give exactly one of threshold or quantile")
    if threshold is not None:
        return scores < threshold, scores
    if not 0 <= quantile <= 1:
        raise ProbModelError(f"quantile must lie in [0, 1], got {quantile}")
    n_flag = math.ceil(quantile * scores.size)
    order = np.argsort(scores, kind="stable")
    flags = np.zeros(scores.size, dtype=bool)
    flags[order[:n_flag]] = True
    return flags, scores


def export_probability_map(model: ProbabilisticModel, points, path) -> None:
    """Write x, y, P(k|x) for every cluster and max_k P(x|k) for each grid point."""
    points = _points(points)
    lj = model.log_joint(points)
    post = np.exp(log_posterior(model, log_joint=lj))
    score = outlier_scores(model, log_joint=lj)
    with open(path, "w") as fh:
        cols = ["x", "y"] + [f"p_k{c}" for c in range(model.k)] + ["max_p_x_given_k"]
        fh.write(",".join(cols) + "\n")
        for p, row, s in zip(points, post, score):
            vals = list(p) + list(row) + [s]
            fh.write(",".join(f"{v:.17g}" for v in vals) + "\n")
