"""Clustering scores, the (%KNN, E_th) sweep and ANLL-based model selection."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from . import graphalloc, probmodel
from .descent import DescentConfig, DescentError, default_energy_threshold, descend
from .kernel import build_model, log_components
from .potential import PotentialField, calibrate_offset

log = logging.getLogger(__name__)

DEFAULT_KNN_GRID = tuple(2.5 * i for i in range(1, 21))
DEFAULT_ETH_GRID = tuple(float(v) for v in np.geomspace(1e-3, 3.0, 16))
WORKERS_ENV = "PQC_WORKERS"


# ---------------------------------------------------------------------------
# scores

def anll(model: probmodel.ProbabilisticModel = None, X=None, *, log_joint=None) -> float:
    """Average negative (natural) log of the winning posterior."""
    lw = probmodel.allocate(model, X, log_joint=log_joint).log_winner_posterior
    if lw.size == 0:
        raise ValueError("ANLL needs at least one point")
    return float(max(0.0, -lw.mean()))


def _contingency(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"label vectors differ in length: {a.size} vs {b.size}")
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    T = np.zeros((ia.max(initial=-1) + 1, ib.max(initial=-1) + 1))
    np.add.at(T, (ia.ravel(), ib.ravel()), 1)
    return T


def jaccard(true_labels, predicted) -> float:
    """Pair-counting Jaccard index n11 / (n11 + n10 + n01)."""
    T = _contingency(true_labels, predicted)
    pairs = lambda x: (x * (x - 1) / 2).sum()
    n11 = pairs(T)
    same_true = pairs(T.sum(axis=1))
    same_pred = pairs(T.sum(axis=0))
    denom = same_true + same_pred - n11
    return 1.0 if denom == 0 else float(n11 / denom)


def cramers_v(labels_a, labels_b) -> float:
    T = _contingency(labels_a, labels_b)
    r, c = T.shape
    if min(r, c) == 1:
        return 1.0 if r == c else 0.0
    n = T.sum()
    E = np.outer(T.sum(axis=1), T.sum(axis=0)) / n
    chi2 = ((T - E) ** 2 / E).sum()
    return float(min(1.0, math.sqrt(chi2 / (n * (min(r, c) - 1)))))


def pearson(x, y):
    """Sample correlation and two-sided p-value from the t distribution."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.size < 3:
        raise ValueError("pearson needs two equal-length series of at least 3 values")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt((xc * xc).sum()), math.sqrt((yc * yc).sum())
    if sx == 0 or sy == 0:
        raise ValueError("pearson is undefined for a constant series")
    rho = float(np.clip((xc * yc).sum() / (sx * sy), -1.0, 1.0))
    dof = x.size - 2
    if abs(rho) == 1.0:
        return rho, 0.0
    t = rho * math.sqrt(dof / (1 - rho * rho))
    return rho, float(2 * stats.t.sf(abs(t), dof))


# ---------------------------------------------------------------------------
# sweep

@dataclass
class Cell:
    knn: float
    eth: float
    eth_used: float
    anll: float
    k_effective: int
    k_sgd: int
    js: float | None = None
    cramers_v: float | None = None
    js_aux: float | None = None
    cramers_v_aux: float | None = None
    trivial: bool = False
    converged: bool = True
    failed: bool = False


@dataclass
class SweepResult:
    knn_grid: list
    eth_grid: list
    variant: str
    cells: list = field(default_factory=list)
    correlations: dict = field(default_factory=dict)

    def cell(self, i: int, j: int) -> Cell:
        return self.cells[i * len(self.eth_grid) + j]

    def grid(self, attr: str) -> np.ndarray:
        vals = [getattr(c, attr) for c in self.cells]
        vals = [np.nan if v is None else v for v in vals]
        return np.array(vals, dtype=float).reshape(len(self.knn_grid), len(self.eth_grid))

    def display_anll(self) -> np.ndarray:
        """ANLL with trivial (single-cluster) cells raised to the sweep maximum."""
        A = self.grid("anll")
        trivial = self.grid("trivial").astype(bool)
        ok = ~trivial & np.isfinite(A)
        top = A[ok].max() if ok.any() else 0.0
        return np.where(trivial, top, A)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["knn", "eth", "eth_used", "anll", "k", "k_sgd", "js", "cv",
                        "js_aux", "cv_aux", "trivial", "converged"])
            fmt = lambda v: "" if v is None else f"{v:.17g}"
            for c in self.cells:
                w.writerow([fmt(c.knn), fmt(c.eth), fmt(c.eth_used), fmt(c.anll), c.k_effective,
                            c.k_sgd, fmt(c.js), fmt(c.cramers_v), fmt(c.js_aux),
                            fmt(c.cramers_v_aux), int(c.trivial), int(c.converged)])

    def to_json(self) -> dict:
        return {"variant": self.variant, "knn_grid": list(self.knn_grid),
                "eth_grid": list(self.eth_grid), "cells": [asdict(c) for c in self.cells],
                "correlations": {str(k): v for k, v in self.correlations.items()}}

    @classmethod
    def from_json(cls, doc):
        return cls(knn_grid=doc["knn_grid"], eth_grid=doc["eth_grid"], variant=doc["variant"],
                   cells=[Cell(**c) for c in doc["cells"]],
                   correlations=doc.get("correlations", {}))


@dataclass(frozen=True, eq=False)
class Fit:
    """Everything produced for one %KNN value before threshold merging."""
    kernel_model: object
    field: PotentialField
    descent: object
    base: graphalloc.Clustering
    default_eth: float
    log_components: np.ndarray

    def at_threshold(self, eth: float):
        """Merged clustering, probabilistic model and allocation at ``eth``."""
        eth = max(eth, self.default_eth)
        merged = graphalloc.merge_by_threshold(self.base, eth, self.descent.final_points)
        pm = probmodel.ProbabilisticModel(self.kernel_model, merged.member_sets)
        lj = pm.log_joint_from_components(self.log_components)
        return merged, pm, probmodel.allocate(pm, log_joint=lj)


def fit_scale(data, variant, knn_percent, config: DescentConfig = DescentConfig(),
              threshold_ratio: float = 1.0, m: int = graphalloc.DEFAULT_NEIGHBOURS) -> Fit:
    X = data.X
    km = build_model(X, variant, knn_percent, threshold_ratio)
    field = calibrate_offset(PotentialField(km), X)
    res = descend(field, X, config)
    base = graphalloc.allocate(res, field, X, m=m, observation_potentials=res.initial_potentials)
    L = log_components(km, X) if km.normalized else None
    return Fit(km, field, res, base, default_energy_threshold(res, config), L)


def _score_cell(fit: Fit, knn, eth, labels, aux_labels) -> Cell:
    merged, pm, alloc = fit.at_threshold(eth)
    lw = alloc.log_winner_posterior
    k_eff = alloc.k_effective
    pred = alloc.compact
    cell = Cell(knn=knn, eth=eth, eth_used=max(eth, fit.default_eth),
                anll=float(max(0.0, -lw.mean())), k_effective=k_eff, k_sgd=merged.k,
                trivial=k_eff == 1, converged=fit.descent.converged)
    if labels is not None:
        cell.js, cell.cramers_v = jaccard(labels, pred), cramers_v(labels, pred)
    if aux_labels is not None:
        cell.js_aux, cell.cramers_v_aux = jaccard(aux_labels, pred), cramers_v(aux_labels, pred)
    return cell


def _sweep_row(args):
    data, variant, knn, eth_grid, config, threshold_ratio, m, labels, aux = args
    try:
        fit = fit_scale(data, variant, knn, config, threshold_ratio, m)
    except (DescentError, ValueError) as exc:
        log.warning("sweep cell %%KNN=%s failed: %s", knn, exc)
        return [Cell(knn=knn, eth=e, eth_used=float("nan"), anll=float("nan"), k_effective=0,
                     k_sgd=0, trivial=False, converged=False, failed=True) for e in eth_grid]
    return [_score_cell(fit, knn, e, labels, aux) for e in eth_grid]


def sweep(data, variant: str, knn_grid=DEFAULT_KNN_GRID, eth_grid=DEFAULT_ETH_GRID,
          config: DescentConfig = DescentConfig(), threshold_ratio: float = 1.0,
          m: int = graphalloc.DEFAULT_NEIGHBOURS, aux_label: str = None,
          workers: int = None) -> SweepResult:
    """Fit every %KNN value and score it at every merge threshold.

    Thresholds below a cell's default (descent-precision) threshold are
    raised to it.  ``workers`` (or the ``PQC_WORKERS`` environment variable)
    runs %KNN rows in separate processes.
    """
    knn_grid = [float(k) for k in knn_grid]
    eth_grid = [float(e) for e in eth_grid]
    if not knn_grid or not eth_grid:
        raise ValueError("sweep grids must be non-empty")
    if knn_grid != sorted(knn_grid) or eth_grid != sorted(eth_grid):
        raise ValueError("sweep grids must be ascending")
    labels = data.labels
    aux = data.aux_labels.get(aux_label) if aux_label else None
    jobs = [(data, variant, k, eth_grid, config, threshold_ratio, m, labels, aux) for k in knn_grid]
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            rows = list(ex.map(_sweep_row, jobs))
    else:
        rows = [_sweep_row(j) for j in jobs]
    result = SweepResult(knn_grid=knn_grid, eth_grid=eth_grid, variant=variant,
                         cells=[c for row in rows for c in row])
    if labels is not None:
        result.correlations = anll_js_correlations(result)
    return result


def anll_js_correlations(result: SweepResult, attr: str = "js") -> dict:
    """Pearson (rho, p) between display ANLL and a score along %KNN, per E_th column."""
    A = result.display_anll()
    S = result.grid(attr)
    out = {}
    for j, eth in enumerate(result.eth_grid):
        ok = np.isfinite(A[:, j]) & np.isfinite(S[:, j])
        try:
            out[eth] = pearson(A[ok, j], S[ok, j])
        except ValueError:
            out[eth] = (None, None)
    return out


# ---------------------------------------------------------------------------
# model selection

STABLE_REL_VARIATION = 0.10
STABLE_RUN = 3
PLATEAU_SIZE = 3
PLATEAU_LOW_FRACTION = 0.1


def _local_minima(a):
    """Indices of strict-left / weak-right local minima of a 1-D series,
    split into interior ones and boundary ones."""
    n = len(a)
    interior, boundary = [], []
    for i in range(n):
        if not np.isfinite(a[i]):
            continue
        left = a[i - 1] if i > 0 else np.inf
        right = a[i + 1] if i < n - 1 else np.inf
        if a[i] < left and a[i] <= right:
            (interior if 0 < i < n - 1 else boundary).append(i)
    return interior, boundary


def _stable_valley(row):
    """Relative ANLL variation along E_th stays below the limit over the first
    STABLE_RUN cells."""
    seg = row[:STABLE_RUN]
    if len(seg) < STABLE_RUN or not np.all(np.isfinite(seg)):
        return False
    ref = max(abs(seg[0]), 1e-12)
    return bool((seg.max() - seg.min()) / ref < STABLE_REL_VARIATION)


def _dedupe(result: SweepResult):
    """Collapse duplicated grid values (keeping the first occurrence)."""
    ki = [i for i, k in enumerate(result.knn_grid) if k not in result.knn_grid[:i]]
    ej = [j for j, e in enumerate(result.eth_grid) if e not in result.eth_grid[:j]]
    return ki, ej


def select_models(result: SweepResult) -> list:
    """Rank candidate (knn, eth) settings from the extended ANLL surface.

    1. local minima of ANLL along %KNN at the lowest threshold, ascending
       %KNN, those with a stable valley along E_th first;
    2. interior minima before boundary minima;
    3. non-trivial low-ANLL plateaus of at least 3x3 cells above the lowest
       threshold, flagged hierarchical.
    """
    ki, ej = _dedupe(result)
    A = result.display_anll()[np.ix_(ki, ej)]
    K = result.grid("k_effective")[np.ix_(ki, ej)]
    T = result.grid("trivial")[np.ix_(ki, ej)].astype(bool)
    knn = [result.knn_grid[i] for i in ki]
    eth = [result.eth_grid[j] for j in ej]
    cells = {(a, b): result.cell(i, j) for a, i in enumerate(ki) for b, j in enumerate(ej)}

    def cand(a, b, kind, **extra):
        c = cells[(a, b)]
        return {"knn": knn[a], "eth": eth[b], "eth_used": c.eth_used, "k": c.k_effective,
                "anll": c.anll, "kind": kind, **extra}

    interior, boundary = _local_minima(A[:, 0])
    interior = [i for i in interior if not T[i, 0]]
    boundary = [i for i in boundary if not T[i, 0]]
    ranked = []
    for group, kind in ((interior, "local_minimum"), (boundary, "boundary_minimum")):
        stable = [i for i in group if _stable_valley(A[i])]
        unstable = [i for i in group if i not in stable]
        ranked += [cand(i, 0, kind, stable=True) for i in stable]
        ranked += [cand(i, 0, kind, stable=False) for i in unstable]

    base = A[:, 0][~T[:, 0] & np.isfinite(A[:, 0])]
    if base.size and len(eth) > PLATEAU_SIZE:
        low = PLATEAU_LOW_FRACTION * base.min()
        ok = (~T) & np.isfinite(A) & (A <= low)
        ok[:, 0] = False
        seen = set()
        for a in range(len(knn) - PLATEAU_SIZE + 1):
            for b in range(1, len(eth) - PLATEAU_SIZE + 1):
                block = (slice(a, a + PLATEAU_SIZE), slice(b, b + PLATEAU_SIZE))
                ks = K[block]
                if ok[block].all() and np.all(ks == ks.flat[0]):
                    key = int(ks.flat[0])
                    if key in seen:
                        continue
                    seen.add(key)
                    ranked.append(cand(a + 1, b + 1, "hierarchical", stable=True,
                                       knn_range=[knn[a], knn[a + PLATEAU_SIZE - 1]],
                                       eth_range=[eth[b], eth[b + PLATEAU_SIZE - 1]]))
    return ranked


def write_sweep(result: SweepResult, csv_path, json_path, candidates=None) -> None:
    result.to_csv(csv_path)
    doc = {"variant": result.variant, "knn_grid": result.knn_grid, "eth_grid": result.eth_grid,
           "candidates": select_models(result) if candidates is None else candidates,
           "correlations": {f"{k:.17g}": v for k, v in result.correlations.items()}}
    with open(json_path, "w") as fh:
        json.dump(doc, fh, indent=2)
