"""Dataset loading, synthetic generators and preprocessing.

Every preprocessing step appends a replayable record to
``Dataset.preprocessing_log`` so that new points can be mapped into the
same coordinates as the training data (see :func:`replay`).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised for unreadable or malformed input data."""


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    labels: np.ndarray | None = None
    lambda_scale: float = 1.0
    preprocessing_log: tuple = ()
    aux_labels: dict = field(default_factory=dict)
    feature_names: tuple = ()

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise DataError(f"X must be a non-empty n x d matrix, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite value at row {bad[0]}, column {bad[1]}")
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        if self.labels is not None:
            labels = np.asarray(self.labels)
            if labels.shape != (X.shape[0],):
                raise DataError("labels must have one entry per row")
            object.__setattr__(self, "labels", labels)
        if self.lambda_scale <= 0:
            raise DataError("lambda_scale must be positive")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def _derive(self, X, entry, **kw) -> "Dataset":
        return replace(self, X=X, preprocessing_log=self.preprocessing_log + (entry,), **kw)


def load_csv(path, label_column=None, aux_label_columns=()) -> Dataset:
    """Read a headed, comma-separated file of real-valued features.

    ``label_column`` (and any ``aux_label_columns``) are kept as strings;
    every other column must parse as a finite real.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path}: empty file (a header row is required)")
    header = [h.strip() for h in rows[0]]
    label_cols = [c for c in [label_column, *aux_label_columns] if c is not None]
    for c in label_cols:
        if c not in header:
            raise DataError(f"{path}: label column {c!r} not in header {header}")
    feat_idx = [j for j, h in enumerate(header) if h not in label_cols]
    if not feat_idx:
        raise DataError(f"{path}: no feature columns")

    body = [r for r in rows[1:] if r and any(cell.strip() for cell in r)]
    if not body:
        raise DataError(f"{path}: no data rows")
    X = np.empty((len(body), len(feat_idx)))
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DataError(f"{path}: row {i + 2} has {len(r)} fields, expected {len(header)}")
        for k, j in enumerate(feat_idx):
            try:
                v = float(r[j])
            except ValueError:
                raise DataError(
                    f"{path}: non-numeric value {r[j]!r} at row {i + 2}, column {header[j]!r}"
                ) from None
            if not math.isfinite(v):
                raise DataError(f"{path}: non-finite value at row {i + 2}, column {header[j]!r}")
            X[i, k] = v

    def column(name):
        j = header.index(name)
        return np.array([r[j].strip() for r in body])

    labels = column(label_column) if label_column is not None else None
    aux = {c: column(c) for c in aux_label_columns}
    return Dataset(X, labels=labels, aux_labels=aux,
                   feature_names=tuple(header[j] for j in feat_idx))


def write_csv(dataset: Dataset, path) -> None:
    names = list(dataset.feature_names) or [f"x{j}" for j in range(dataset.d)]
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + (["label"] if dataset.labels is not None else []))
        for i, row in enumerate(dataset.X):
            out = [repr(float(v)) for v in row]
            if dataset.labels is not None:
                out.append(str(dataset.labels[i]))
            w.writerow(out)


def standardize(data: Dataset) -> Dataset:
    X = data.X
    mean = X.mean(axis=0)
    std = X.std(axis=0, ddof=1) if data.n > 1 else np.zeros(data.d)
    zero = std <= 1e-12 * np.maximum(1.0, np.abs(mean))
    safe = np.where(zero, 1.0, std)
    Z = np.where(zero, 0.0, (X - mean) / safe)
    entry = {"op": "standardize", "mean": mean.tolist(), "std": safe.tolist(),
             "zero_variance": np.flatnonzero(zero).tolist()}
    return data._derive(Z, entry)


def rescale_mean_norm(data: Dataset) -> Dataset:
    lam = float(np.linalg.norm(data.X, axis=1).mean())
    if lam <= 0:
        raise DataError("all rows have zero norm; scale factor is undefined")
    entry = {"op": "rescale", "lambda": lam}
    return data._derive(data.X / lam, entry, lambda_scale=data.lambda_scale * lam)


def pca_project(data: Dataset, n_components: int, first: int = 1) -> Dataset:
    """Project onto ``n_components`` principal axes, starting at the
    ``first``-th largest (1-based)."""
    if not 1 <= n_components <= data.d:
        raise DataError(f"n_components must be in [1, {data.d}], got {n_components}")
    if first < 1 or first + n_components - 1 > data.d:
        raise DataError(f"components {first}..{first + n_components - 1} exceed d={data.d}")
    mean = data.X.mean(axis=0)
    C = np.cov(data.X - mean, rowvar=False, ddof=1) if data.n > 1 else np.zeros((data.d, data.d))
    C = np.atleast_2d(C)
    evals, evecs = np.linalg.eigh(C)
    order = np.argsort(evals, kind="stable")[::-1][first - 1:first - 1 + n_components]
    W = evecs[:, order]
    # sign convention: the largest-magnitude loading of each axis is positive
    pivot = np.abs(W).argmax(axis=0)
    W = W * np.sign(W[pivot, np.arange(n_components)])
    entry = {"op": "pca", "mean": mean.tolist(), "components": W.T.tolist(),
             "explained_variance": evals[order].tolist()}
    return data._derive((data.X - mean) @ W, entry,
                        feature_names=tuple(f"PC{j + first}" for j in range(n_components)))


def replay(log, X) -> np.ndarray:
    """Apply a recorded preprocessing log to raw points."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    for entry in log:
        op = entry["op"]
        if op == "standardize":
            Z = (X - np.asarray(entry["mean"])) / np.asarray(entry["std"])
            Z[:, entry["zero_variance"]] = 0.0
            X = Z
        elif op == "pca":
            X = (X - np.asarray(entry["mean"])) @ np.asarray(entry["components"]).T
        elif op == "rescale":
            X = X / entry["lambda"]
        else:
            raise DataError(f"unknown preprocessing op {op!r}")
    return X


def preprocess(data: Dataset, standardize_: bool = True, pca_components: int | None = None,
               rescale: bool = True, pca_first: int = 1) -> Dataset:
    if standardize_:
        data = standardize(data)
    if pca_components:
        data = pca_project(data, pca_components, pca_first)
    if rescale:
        data = rescale_mean_norm(data)
    return data


# ---------------------------------------------------------------------------
# synthetic data

def _rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def gen_local_densities(seed: int = 0) -> Dataset:
    """Four 2-D clusters of 100 points: two elongated Gaussians, plus a compact
    dense cluster overlapping the rim of a broad sparse one."""
    rng = np.random.default_rng(seed)
    blocks = []
    # (center, axis stds, rotation)
    specs = [
        ((-3.0, 2.5), (2.0, 0.22), math.pi / 8),    # cigar A
        ((3.2, 2.0), (0.22, 2.0), -math.pi / 10),   # cigar B
        ((0.0, -3.5), (1.2, 1.2), 0.0),             # broad sparse
        ((1.8, -3.0), (0.25, 0.25), 0.0),           # dense, on the sparse cluster's flank
    ]
    for center, stds, rot in specs:
        Z = rng.standard_normal((100, 2)) * np.asarray(stds)
        blocks.append(Z @ _rotation(rot).T + np.asarray(center))
    X = np.vstack(blocks)
    labels = np.repeat(np.array(["cigar_a", "cigar_b", "sparse", "dense"]), 100)
    return Dataset(X, labels=labels, feature_names=("x", "y"))


SPIRAL_TURNS = 1.5
SPIRAL_THETA0 = 0.5 * math.pi
SPIRAL_PITCH = 1.0 / math.pi  # radius grows by 2 per turn


def spiral_curve(theta, phase=0.0):
    r = SPIRAL_PITCH * theta
    return np.column_stack([r * np.cos(theta + phase), r * np.sin(theta + phase)])


def _even_arc_angles(n: int) -> np.ndarray:
    """Angles of n points equally spaced in arc length along the spiral."""
    t = np.linspace(SPIRAL_THETA0, SPIRAL_THETA0 + 2 * math.pi * SPIRAL_TURNS, 4097)
    seg = SPIRAL_PITCH * np.hypot(1.0, t)
    s = np.concatenate([[0.0], np.cumsum(0.5 * (seg[1:] + seg[:-1]) * np.diff(t))])
    return np.interp(np.linspace(0.0, s[-1], n), s, t)


def gen_two_spirals(seed: int = 0, noise=(0.1, 0.025), n_per_spiral: int = 200) -> Dataset:
    """Two interleaved Archimedean spirals with Gaussian radial noise."""
    rng = np.random.default_rng(seed)
    blocks = []
    for k, (phase, sd) in enumerate(zip((0.0, math.pi), noise)):
        theta = _even_arc_angles(n_per_spiral)
        r = SPIRAL_PITCH * theta + sd * rng.standard_normal(n_per_spiral)
        blocks.append(np.column_stack([r * np.cos(theta + phase), r * np.sin(theta + phase)]))
    X = np.vstack(blocks)
    labels = np.repeat(np.array(["spiral_1", "spiral_2"]), n_per_spiral)
    return Dataset(X, labels=labels, feature_names=("x", "y"))


GENERATORS = {
    "local-densities": gen_local_densities,
    "two-spirals": gen_two_spirals,
}


# ---------------------------------------------------------------------------
# bundled real-world data

def _bundled(name):
    return resources.files("pqc").joinpath("data").joinpath(name)


def load_crabs() -> Dataset:
    """Leptograpsus crabs: 200 x 5 morphological measurements, labels = species+sex."""
    with resources.as_file(_bundled("crabs.csv")) as p:
        return load_csv(p, label_column="group")


def load_olive() -> Dataset:
    """Italian olive oils: 572 x 8 fatty-acid percentages.

    ``labels`` holds the nine collection areas, ``aux_labels['region']`` the
    three macro regions.
    """
    with resources.as_file(_bundled("olive.csv")) as p:
        return load_csv(p, label_column="area", aux_label_columns=("region",))


BUNDLED = {"crabs": load_crabs, "olive": load_olive}


def load_named(name: str, seed: int = 0) -> Dataset:
    if name in GENERATORS:
        return GENERATORS[name](seed)
    if name in BUNDLED:
        return BUNDLED[name]()
    raise DataError(f"unknown dataset {name!r}; choose from {sorted(GENERATORS) + sorted(BUNDLED)}")
