"""Schrodinger potential V(x) and its analytic gradient.

All variants share the form ``V = E + <F_i>`` where ``<.>`` is the
psi-weighted average over kernels.  With ``g_i = -grad log psi_i``::

    grad V = <grad F_i> - <F_i g_i> + <F_i><g_i>

global / knn:  F_i = |x - x_i|^2 / (2 s_i^2) - d/2,      g_i = grad F_i = (x - x_i) / s_i^2
cov:           F_i = tr(S_i)/2 (|S_i^-1 r|^2 - tr S_i^-1),  g_i = S_i^-1 r,  grad F_i = tr(S_i) S_i^-2 r
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .kernel import COV, KernelModel

_CHUNK_ELEMS = 2_000_000


def _terms(model: KernelModel, Y):
    """log psi, F, grad F and g for every (query, kernel) pair."""
    R = Y[:, None, :] - model.centers[None, :, :]
    if model.variant == COV:
        # batched over kernels: (n, m, d) @ (n, d, d)
        Rn = np.swapaxes(R, 0, 1)
        G = np.swapaxes(Rn @ model.precisions, 0, 1)
        quad = np.einsum("mni,mni->mn", R, G)
        tr = np.trace(model.covariances, axis1=1, axis2=2)
        tr_inv = np.trace(model.precisions, axis1=1, axis2=2)
        F = 0.5 * tr * (np.einsum("mni,mni->mn", G, G) - tr_inv)
        GF = np.swapaxes(np.swapaxes(G, 0, 1) @ model.precisions, 0, 1) * tr[None, :, None]
    else:
        s2 = model.scale2()
        G = R / s2[None, :, None]
        quad = np.einsum("mni,mni->mn", R, R) / s2
        F = 0.5 * quad - 0.5 * model.d
        GF = G
    logpsi = model.log_norms() - 0.5 * quad
    return logpsi, F, GF, G


def _weights(logpsi):
    w = np.exp(logpsi - logpsi.max(axis=1, keepdims=True))
    return w / w.sum(axis=1, keepdims=True)


def _direct(model, Y, gradient):
    logpsi, F, GF, G = _terms(model, Y)
    w = _weights(logpsi)
    V = np.einsum("mn,mn->m", w, F)
    if not gradient:
        return V, None
    mean_gF = np.einsum("mn,mni->mi", w, GF)
    mean_Fg = np.einsum("mn,mni->mi", w * F, G)
    mean_g = np.einsum("mn,mni->mi", w, G)
    return V, mean_gF - mean_Fg + V[:, None] * mean_g


class _Expanded:
    """Per-model constants for evaluating V and grad V with matrix products.

    Quadratic forms (y - x_i)^T A_i (y - x_i) are expanded as
    y^T A_i y - 2 y^T A_i x_i + x_i^T A_i x_i so that all kernel sums become
    GEMMs against flattened per-kernel matrices.
    """

    def __init__(self, model: KernelModel):
        X = model.centers
        self.d = model.d
        self.lognorm = model.log_norms()
        if model.variant == COV:
            P = model.precisions
            Q = P @ P
            self.Pf = P.reshape(model.n, -1)
            self.Qf = Q.reshape(model.n, -1)
            self.bP = np.einsum("nij,nj->ni", P, X)
            self.bQ = np.einsum("nij,nj->ni", Q, X)
            self.cP = np.einsum("ni,ni->n", X, self.bP)
            self.cQ = np.einsum("ni,ni->n", X, self.bQ)
            self.tr = np.trace(model.covariances, axis1=1, axis2=2)
            self.tr_inv = np.trace(P, axis1=1, axis2=2)
            self.iso = False
        else:
            self.X = X
            self.inv = 1.0 / model.scale2()
            self.x2 = np.einsum("ni,ni->n", X, X)
            self.iso = True

    def __call__(self, Y, gradient):
        m, d = Y.shape
        if self.iso:
            sq = (Y * Y).sum(axis=1)[:, None] - 2.0 * (Y @ self.X.T) + self.x2
            quad = np.maximum(sq, 0.0) * self.inv
            F = 0.5 * quad - 0.5 * d
        else:
            Yo = np.einsum("mi,mj->mij", Y, Y).reshape(m, -1)
            quad = np.maximum(Yo @ self.Pf.T - 2.0 * (Y @ self.bP.T) + self.cP, 0.0)
            gg = np.maximum(Yo @ self.Qf.T - 2.0 * (Y @ self.bQ.T) + self.cQ, 0.0)
            F = 0.5 * self.tr * (gg - self.tr_inv)
        w = _weights(self.lognorm - 0.5 * quad)
        wF = w * F
        V = wF.sum(axis=1)
        if not gradient:
            return V, None
        if self.iso:
            a = w * self.inv
            b = wF * self.inv
            mean_g = Y * a.sum(axis=1)[:, None] - a @ self.X
            mean_Fg = Y * b.sum(axis=1)[:, None] - b @ self.X
            mean_gF = mean_g
        else:
            def apply(weights, flat, shift):
                M = (weights @ flat).reshape(m, d, d)
                return np.einsum("mij,mj->mi", M, Y) - weights @ shift
            mean_g = apply(w, self.Pf, self.bP)
            mean_Fg = apply(wF, self.Pf, self.bP)
            mean_gF = apply(w * self.tr, self.Qf, self.bQ)
        return V, mean_gF - mean_Fg + V[:, None] * mean_g


def _expanded(model):
    cache = model.__dict__.get("_expanded_cache")
    if cache is None:
        cache = _Expanded(model)
        object.__setattr__(model, "_expanded_cache", cache)
    return cache


def evaluate(model: KernelModel, Y, gradient: bool = True, method: str = "expanded"):
    """Offset-free potential (V - E) at each row of Y, and optionally its gradient.

    ``method="direct"`` forms every difference vector explicitly; it is
    slower but free of the cancellation in the expanded quadratic forms.
    """
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    m = Y.shape[0]
    V = np.empty(m)
    dV = np.empty((m, model.d)) if gradient else None
    if method == "direct":
        step = max(1, _CHUNK_ELEMS // max(1, model.n * model.d))
        fn = lambda chunk: _direct(model, chunk, gradient)
    elif method == "expanded":
        step = max(1, _CHUNK_ELEMS // max(1, model.n * model.d * model.d))
        ex = _expanded(model)
        fn = lambda chunk: ex(chunk, gradient)
    else:
        raise ValueError(f"unknown method {method!r}")
    for a in range(0, m, step):
        b = min(m, a + step)
        Vc, Gc = fn(Y[a:b])
        V[a:b] = Vc
        if gradient:
            dV[a:b] = Gc
    return V, dV


@dataclass(frozen=True, eq=False)
class PotentialField:
    model: KernelModel
    energy_offset: float = 0.0

    def values(self, Y) -> np.ndarray:
        return evaluate(self.model, Y, gradient=False)[0] + self.energy_offset

    def values_and_gradients(self, Y):
        V, dV = evaluate(self.model, Y, gradient=True)
        return V + self.energy_offset, dV


def potential(field: PotentialField, x) -> float:
    return float(field.values(np.reshape(x, (1, -1)))[0])


def gradient(field: PotentialField, x) -> np.ndarray:
    return field.values_and_gradients(np.reshape(x, (1, -1)))[1][0]


def calibrate_offset(field: PotentialField, points) -> PotentialField:
    """Choose E so that the minimum of V over ``points`` is exactly zero."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    if points.shape[0] == 0:
        raise ValueError("calibration needs at least one point")
    base = evaluate(field.model, points, gradient=False)[0]
    return replace(field, energy_offset=-float(base.min()))


def grid_points(bounds, resolution: int):
    (x0, x1), (y0, y1) = bounds
    xs = np.linspace(x0, x1, resolution)
    ys = np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys, indexing="xy")
    return np.column_stack([gx.ravel(), gy.ravel()])


def export_grid(field: PotentialField, bounds, resolution: int, path) -> None:
    """Write x, y, V, dV/dx, dV/dy on a regular 2-D grid."""
    if field.model.d != 2:
        raise ValueError("grid export is only defined for 2-D models")
    P = grid_points(bounds, resolution)
    V, dV = field.values_and_gradients(P)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["x", "y", "V", "dVdx", "dVdy"])
        for p, v, g in zip(P, V, dV):
            w.writerow([f"{p[0]:.17g}", f"{p[1]:.17g}", f"{v:.17g}", f"{g[0]:.17g}", f"{g[1]:.17g}"])
