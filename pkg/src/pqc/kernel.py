"""Per-observation Gaussian components and the wave function they define.

Three variants are supported:

``global``
    one shared length scale, unnormalised kernels.
``knn``
    a per-point length scale (mean distance to the K nearest neighbours),
    normalised isotropic kernels.
``cov``
    a per-point local covariance estimated from the K nearest neighbours,
    eigenvalue-floored and normalised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import logsumexp

GLOBAL, KNN, COV = "global", "knn", "cov"
VARIANTS = (GLOBAL, KNN, COV)
LOG_2PI = math.log(2 * math.pi)


class KernelError(ValueError):
    pass


def _as_matrix(data):
    X = getattr(data, "X", data)
    return np.atleast_2d(np.asarray(X, dtype=float))


def neighbour_count(knn_percent: float, n: int) -> int:
    """K = round(knn_percent * n / 100), rounding halves up."""
    return int(math.floor(knn_percent * n / 100.0 + 0.5))


def knn_table(X, K: int):
    """Indices and distances of the K nearest neighbours of every row.

    The point itself is excluded; equal distances are ordered by row index.
    """
    n = X.shape[0]
    if K < 1 or K > n - 1:
        raise KernelError(f"neighbour count K={K} must lie in [1, n-1={n - 1}]")
    D = cdist(X, X)
    np.fill_diagonal(D, np.inf)
    idx = np.argsort(D, axis=1, kind="stable")[:, :K]
    return idx, np.take_along_axis(D, idx, axis=1)


def sigma_global_quantile(data, knn_percent: float) -> float:
    X = _as_matrix(data)
    K = neighbour_count(knn_percent, X.shape[0])
    _, dist = knn_table(X, K)
    return float(dist.mean())


def sigma_per_point(data, knn_percent: float = None, *, K: int = None) -> np.ndarray:
    X = _as_matrix(data)
    if K is None:
        K = neighbour_count(knn_percent, X.shape[0])
    _, dist = knn_table(X, K)
    sig = dist.mean(axis=1)
    bad = np.flatnonzero(sig <= 0)
    if bad.size:
        raise KernelError(f"degenerate kernel: zero length scale at rows {bad.tolist()}")
    return sig


def local_covariance(data, knn_percent: float = None, *, K: int = None) -> np.ndarray:
    """Scatter of the K nearest neighbours about the point itself, divided by K-1."""
    X = _as_matrix(data)
    if K is None:
        K = neighbour_count(knn_percent, X.shape[0])
    if K < 2:
        raise KernelError(f"local covariance needs K >= 2 neighbours, got {K}")
    idx, _ = knn_table(X, K)
    R = X[idx] - X[:, None, :]
    return np.einsum("nki,nkj->nij", R, R) / (K - 1)


def covariance_floor(data, knn_percent: float, threshold_ratio: float = 1.0) -> np.ndarray:
    """Per-point eigenvalue floor sigma_{k'nn,i}^2 / d with K' = round(r K)."""
    X = _as_matrix(data)
    if not 0 < threshold_ratio <= 1:
        raise KernelError(f"threshold_ratio must lie in (0, 1], got {threshold_ratio}")
    K = neighbour_count(knn_percent, X.shape[0])
    K2 = int(math.floor(threshold_ratio * K + 0.5))
    if K2 < 1:
        raise KernelError(f"round(r*K) = {K2} < 1")
    return sigma_per_point(X, K=K2) ** 2 / X.shape[1]


def clamp_eigenvalues(covs, floors):
    """Raise every eigenvalue of each covariance to at least its floor.

    Returns the clamped matrices and their eigen-decompositions.
    """
    covs = np.asarray(covs, dtype=float)
    covs = 0.5 * (covs + np.swapaxes(covs, -1, -2))
    evals, evecs = np.linalg.eigh(covs)
    evals = np.maximum(evals, np.asarray(floors, dtype=float)[:, None])
    out = np.einsum("nij,nj,nkj->nik", evecs, evals, evecs)
    return 0.5 * (out + np.swapaxes(out, -1, -2)), evals, evecs


def threshold_covariance(covs, data, knn_percent: float, threshold_ratio: float = 1.0):
    floors = covariance_floor(data, knn_percent, threshold_ratio)
    return clamp_eigenvalues(covs, floors)[0]


@dataclass(frozen=True, eq=False)
class KernelModel:
    variant: str
    centers: np.ndarray
    global_sigma: float | None = None
    sigmas: np.ndarray | None = None
    covariances: np.ndarray | None = None
    knn_percent: float | None = None
    threshold_ratio: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise KernelError(f"unknown variant {self.variant!r}")
        centers = np.atleast_2d(np.asarray(self.centers, dtype=float))
        object.__setattr__(self, "centers", centers)
        n, d = centers.shape
        if self.variant == GLOBAL:
            if self.global_sigma is None or not self.global_sigma > 0:
                raise KernelError(f"global sigma must be positive, got {self.global_sigma}")
            object.__setattr__(self, "global_sigma", float(self.global_sigma))
        if self.variant in (KNN, COV) and self.sigmas is not None:
            sig = np.asarray(self.sigmas, dtype=float)
            if sig.shape != (n,) or np.any(~(sig > 0)):
                raise KernelError("per-point sigmas must be n positive values")
            object.__setattr__(self, "sigmas", sig)
        if self.variant == KNN and self.sigmas is None:
            raise KernelError("knn variant requires sigmas")
        if self.variant == COV:
            if self.covariances is None:
                raise KernelError("cov variant requires covariances")
            C = np.asarray(self.covariances, dtype=float).reshape(n, d, d)
            if np.abs(C - np.swapaxes(C, 1, 2)).max(initial=0.0) > 1e-10:
                raise KernelError("covariances must be symmetric")
            evals, evecs = np.linalg.eigh(C)
            if np.any(evals <= 0):
                raise KernelError(f"covariances must be positive definite (rows {np.flatnonzero((evals <= 0).any(1)).tolist()})")
            prec = np.einsum("nij,nj,nkj->nik", evecs, 1.0 / evals, evecs)
            object.__setattr__(self, "covariances", C)
            object.__setattr__(self, "eigvals", evals)
            object.__setattr__(self, "eigvecs", evecs)
            object.__setattr__(self, "precisions", 0.5 * (prec + np.swapaxes(prec, 1, 2)))
            object.__setattr__(self, "logdets", np.log(evals).sum(axis=1))

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    @property
    def d(self) -> int:
        return self.centers.shape[1]

    @property
    def normalized(self) -> bool:
        return self.variant != GLOBAL

    def scale2(self) -> np.ndarray:
        """Squared isotropic length scale per kernel (global/knn variants)."""
        if self.variant == GLOBAL:
            return np.full(self.n, self.global_sigma ** 2)
        return self.sigmas ** 2

    def log_norms(self) -> np.ndarray:
        """Per-kernel log normalising constants."""
        if self.variant == GLOBAL:
            return np.zeros(self.n)
        if self.variant == KNN:
            return -0.5 * self.d * LOG_2PI - self.d * np.log(self.sigmas)
        return -0.5 * (self.d * LOG_2PI + self.logdets)

    def to_dict(self) -> dict:
        out = {"variant": self.variant, "centers": self.centers.tolist(),
               "knn_percent": self.knn_percent, "threshold_ratio": self.threshold_ratio}
        if self.global_sigma is not None:
            out["global_sigma"] = self.global_sigma
        if self.sigmas is not None:
            out["sigmas"] = self.sigmas.tolist()
        if self.covariances is not None:
            out["covariances"] = self.covariances.tolist()
        return out

    @classmethod
    def from_dict(cls, doc: dict) -> "KernelModel":
        return cls(variant=doc["variant"], centers=np.asarray(doc["centers"]),
                   global_sigma=doc.get("global_sigma"),
                   sigmas=None if doc.get("sigmas") is None else np.asarray(doc["sigmas"]),
                   covariances=None if doc.get("covariances") is None else np.asarray(doc["covariances"]),
                   knn_percent=doc.get("knn_percent"),
                   threshold_ratio=doc.get("threshold_ratio", 1.0))


def build_model(data, variant: str, knn_percent: float, threshold_ratio: float = 1.0) -> KernelModel:
    X = _as_matrix(data)
    if variant == GLOBAL:
        return KernelModel(GLOBAL, X, global_sigma=sigma_global_quantile(X, knn_percent),
                           knn_percent=knn_percent, threshold_ratio=threshold_ratio)
    if variant == KNN:
        return KernelModel(KNN, X, sigmas=sigma_per_point(X, knn_percent),
                           knn_percent=knn_percent, threshold_ratio=threshold_ratio)
    if variant == COV:
        covs = threshold_covariance(local_covariance(X, knn_percent), X, knn_percent, threshold_ratio)
        return KernelModel(COV, X, sigmas=sigma_per_point(X, knn_percent), covariances=covs,
                           knn_percent=knn_percent, threshold_ratio=threshold_ratio)
    raise KernelError(f"unknown variant {variant!r}")


def log_components(model: KernelModel, Y) -> np.ndarray:
    """Matrix of log psi_i(y) with shape (len(Y), n)."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    R = Y[:, None, :] - model.centers[None, :, :]
    if model.variant == COV:
        quad = np.einsum("mni,nij,mnj->mn", R, model.precisions, R)
    else:
        quad = np.einsum("mni,mni->mn", R, R) / model.scale2()
    return model.log_norms() - 0.5 * quad


def component_log_density(model: KernelModel, i: int, x) -> float:
    if not 0 <= i < model.n:
        raise IndexError(f"kernel index {i} out of range [0, {model.n})")
    x = np.asarray(x, dtype=float).reshape(1, -1)
    r = x[0] - model.centers[i]
    if model.variant == COV:
        quad = r @ model.precisions[i] @ r
    else:
        quad = r @ r / model.scale2()[i]
    return float(model.log_norms()[i] - 0.5 * quad)


def log_wavefunction(model: KernelModel, Y) -> np.ndarray:
    """log Psi at each row of Y (mean of kernels if normalised, sum otherwise)."""
    L = log_components(model, Y)
    out = logsumexp(L, axis=1)
    if model.normalized:
        out -= math.log(model.n)
    return out


def wavefunction(model: KernelModel, x):
    """Psi(x) in linear scale; a scalar for a single point."""
    x = np.asarray(x, dtype=float)
    vals = np.exp(log_wavefunction(model, np.atleast_2d(x)))
    return float(vals[0]) if x.ndim <= 1 else vals
