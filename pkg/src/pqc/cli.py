"""Command-line front end: generate, fit, sweep, allocate and score.

Every run is driven by one JSON config (see ``RunConfig``); flags override
config values.  Reports are staged in a temporary directory inside the
output directory and renamed into place only once all of them are written.

Exit codes: 0 success (warnings allowed), 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import shutil
import sys
import tempfile
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dataio, graphalloc, kernel, probmodel, scoring
from .descent import DescentConfig
from .potential import grid_points

log = logging.getLogger("pqc")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
MAP_RESOLUTION = 100
MAP_MARGIN = 0.1


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass
class RunConfig:
    """All knobs of a fit or sweep.  Defaults are the documented behaviour."""
    dataset: str | None = "local-densities"   # generator or bundled dataset name
    csv: str | None = None                    # used instead of ``dataset`` when set
    label_column: str | None = None
    aux_label_columns: list = field(default_factory=list)
    aux_label: str | None = None              # second labelling scored in sweeps
    seed: int = 0
    standardize: bool = True
    rescale: bool = True
    pca_components: int | None = None
    pca_first: int = 1
    variant: str = "knn"
    knn: float = 17.5
    knn_grid: list = field(default_factory=lambda: list(scoring.DEFAULT_KNN_GRID))
    eth: float | None = None                  # None: the descent-precision default
    eth_grid: list = field(default_factory=lambda: list(scoring.DEFAULT_ETH_GRID))
    threshold_ratio: float | list = 1.0       # a list runs one sweep per ratio
    graph_neighbours: int = graphalloc.DEFAULT_NEIGHBOURS
    descent: dict = field(default_factory=dict)
    outlier_quantile: float | None = 0.05
    outlier_threshold: float | None = None
    map_resolution: int = MAP_RESOLUTION
    out: str = "pqc-out"

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError(["config must be a JSON object"])
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        return cls(**doc)

    def descent_config(self) -> DescentConfig:
        return DescentConfig(**self.descent)

    def ratios(self) -> list:
        r = self.threshold_ratio
        return [float(x) for x in r] if isinstance(r, list) else [float(r)]

    def validate(self, command: str) -> None:
        problems = []
        if self.csv is not None:
            if not Path(self.csv).is_file():
                problems.append(f"input file not found: {self.csv}")
        elif self.dataset not in dataio.GENERATORS and self.dataset not in dataio.BUNDLED:
            choices = sorted(dataio.GENERATORS) + sorted(dataio.BUNDLED)
            problems.append(f"unknown dataset {self.dataset!r}; choose from {choices}")
        if self.variant not in kernel.VARIANTS:
            problems.append(f"variant must be one of {list(kernel.VARIANTS)}, got {self.variant!r}")
        if not isinstance(self.seed, int):
            problems.append("seed must be an integer")
        if self.pca_components is not None and not (isinstance(self.pca_components, int)
                                                    and self.pca_components >= 1):
            problems.append("pca_components must be a positive integer or null")
        if not (isinstance(self.pca_first, int) and self.pca_first >= 1):
            problems.append("pca_first must be a positive integer")
        if not _positive(self.graph_neighbours) or not isinstance(self.graph_neighbours, int):
            problems.append("graph_neighbours must be a positive integer")
        for r in (self.threshold_ratio if isinstance(self.threshold_ratio, list)
                  else [self.threshold_ratio]):
            if not (_number(r) and 0 < r <= 1):
                problems.append(f"threshold_ratio values must lie in (0, 1], got {r!r}")
        if isinstance(self.threshold_ratio, list) and not self.threshold_ratio:
            problems.append("threshold_ratio list is empty")
        try:
            self.descent_config()
        except (TypeError, ValueError) as exc:
            problems.append(f"descent: {exc}")
        if (self.outlier_quantile is None) == (self.outlier_threshold is None):
            problems.append("give exactly one of outlier_quantile or outlier_threshold")
        if self.outlier_quantile is not None and not (_number(self.outlier_quantile)
                                                      and 0 <= self.outlier_quantile <= 1):
            problems.append("outlier_quantile must lie in [0, 1]")
        if not (isinstance(self.map_resolution, int) and self.map_resolution >= 2):
            problems.append("map_resolution must be an integer >= 2")
        if command == "fit":
            if not (_positive(self.knn) and self.knn <= 100):
                problems.append(f"knn must lie in (0, 100], got {self.knn!r}")
            if self.eth is not None and not (_number(self.eth) and self.eth >= 0):
                problems.append(f"eth must be a non-negative number or null, got {self.eth!r}")
        if command == "sweep":
            for name in ("knn_grid", "eth_grid"):
                grid = getattr(self, name)
                if not isinstance(grid, list) or not grid:
                    problems.append(f"{name} must be a non-empty list")
                elif not all(_number(v) for v in grid):
                    problems.append(f"{name} must contain numbers only")
                elif grid != sorted(grid):
                    problems.append(f"{name} must be ascending")
            if isinstance(self.knn_grid, list) and any(_number(v) and not 0 < v <= 100
                                                       for v in self.knn_grid):
                problems.append("knn_grid values must lie in (0, 100]")
            if isinstance(self.eth_grid, list) and any(_number(v) and v < 0 for v in self.eth_grid):
                problems.append("eth_grid values must be non-negative")
        if problems:
            raise ConfigError(problems)


def _number(v) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _positive(v) -> bool:
    return _number(v) and v > 0


def _fmt(v) -> str:
    return f"{float(v):.17g}"


# ---------------------------------------------------------------------------
# atomic output

class Staging:
    """Collects output files in a hidden directory and moves them into
    ``out`` on success; on failure nothing is left behind."""

    def __init__(self, out):
        self.out = Path(out)

    def __enter__(self):
        self.created = not self.out.exists()
        self.out.mkdir(parents=True, exist_ok=True)
        self.dir = Path(tempfile.mkdtemp(prefix=".staging-", dir=self.out))
        return self

    def path(self, name) -> Path:
        return self.dir / name

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for p in sorted(self.dir.iterdir()):
                    os.replace(p, self.out / p.name)
        finally:
            shutil.rmtree(self.dir, ignore_errors=True)
            if exc_type is not None and self.created:
                shutil.rmtree(self.out, ignore_errors=True)
        return False


def _write_json(path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, allow_nan=False, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def _finite_or_none(v):
    return None if v is None or not math.isfinite(v) else float(v)


# ---------------------------------------------------------------------------
# data

def load_dataset(cfg: RunConfig) -> dataio.Dataset:
    if cfg.csv is not None:
        raw = dataio.load_csv(cfg.csv, cfg.label_column, tuple(cfg.aux_label_columns))
    else:
        raw = dataio.load_named(cfg.dataset, cfg.seed)
    return dataio.preprocess(raw, standardize_=cfg.standardize, pca_components=cfg.pca_components,
                             rescale=cfg.rescale, pca_first=cfg.pca_first)


def _read_points(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise dataio.DataError(f"no such file: {path}")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise dataio.DataError(f"{path}: a header and at least one row are required")
    header = rows[0]
    numeric = []
    for j in range(len(header)):
        try:
            [float(r[j]) for r in rows[1:] if r]
            numeric.append(j)
        except (ValueError, IndexError):
            pass
    return np.array([[float(r[j]) for j in numeric] for r in rows[1:] if r])


def _read_column(path, column):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or column not in reader.fieldnames:
            raise dataio.DataError(f"{path}: no column {column!r}")
        return np.array([row[column] for row in reader])


# ---------------------------------------------------------------------------
# commands

def cmd_generate(name: str, seed: int, out_path) -> None:
    if name not in dataio.GENERATORS:
        raise ConfigError([f"unknown generator {name!r}; choose from {sorted(dataio.GENERATORS)}"])
    data = dataio.GENERATORS[name](seed)
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".gen-", dir=out_path.parent)
    os.close(fd)
    try:
        dataio.write_csv(data, tmp)
        os.replace(tmp, out_path)
    finally:
        if os.path.exists(tmp):
            os.remove(tmp)


def _map_bounds(X, margin=MAP_MARGIN):
    lo, hi = X.min(axis=0), X.max(axis=0)
    pad = margin * np.maximum(hi - lo, 1e-12)
    return [(float(lo[0] - pad[0]), float(hi[0] + pad[0])),
            (float(lo[1] - pad[1]), float(hi[1] + pad[1]))]


def cmd_fit(cfg: RunConfig) -> dict:
    data = load_dataset(cfg)
    fit = scoring.fit_scale(data, cfg.variant, cfg.knn, cfg.descent_config(),
                            cfg.ratios()[0], cfg.graph_neighbours)
    eth = fit.default_eth if cfg.eth is None else cfg.eth
    res = fit.descent
    if not res.converged:
        log.warning("descent did not converge in %d iterations", res.iterations_used)
    eth_used = max(eth, fit.default_eth)
    merged = graphalloc.merge_by_threshold(fit.base, eth_used, res.final_points)

    metrics = {"variant": cfg.variant, "knn": cfg.knn, "eth": eth, "eth_used": eth_used,
               "k_sgd": merged.k, "converged": res.converged,
               "iterations": res.iterations_used,
               "last_max_step": _finite_or_none(res.last_max_step),
               "last_max_dV": _finite_or_none(res.last_max_dV)}
    model_doc = {"kernel_model": fit.kernel_model.to_dict(),
                 "preprocessing": list(data.preprocessing_log),
                 "feature_names": list(data.feature_names),
                 "energy_offset": fit.field.energy_offset,
                 "clustering": merged.to_json(),
                 "cluster_members": [s.tolist() for s in merged.member_sets]}
    rows = {"index": np.arange(data.n), "sgd_cluster": merged.assignment}

    pm = None
    if fit.kernel_model.normalized:
        pm = probmodel.ProbabilisticModel(fit.kernel_model, merged.member_sets)
        lj = pm.log_joint_from_components(fit.log_components)
        alloc = probmodel.allocate(pm, log_joint=lj)
        if cfg.outlier_threshold is not None:
            flags, scores = probmodel.outlier_flags(pm, threshold=cfg.outlier_threshold, log_joint=lj)
            threshold = cfg.outlier_threshold
        else:
            flags, scores = probmodel.outlier_flags(pm, quantile=cfg.outlier_quantile, log_joint=lj)
            threshold = probmodel.quantile_threshold(scores, cfg.outlier_quantile)
        pred = alloc.assignment
        metrics.update(anll=scoring.anll(pm, log_joint=lj), k=alloc.k_effective,
                       empty_clusters=list(alloc.empty_clusters),
                       sgd_disagreement=float(np.mean(merged.assignment != pred)))
        model_doc["outlier_threshold"] = _finite_or_none(threshold)
        rows.update(cluster=pred, winner_posterior=alloc.winner_posterior,
                    outlier_score=scores, outlier=flags.astype(int))
    else:
        pred = merged.assignment
        metrics.update(anll=None, k=merged.k)
        rows.update(cluster=pred)
    if data.labels is not None:
        metrics.update(js=scoring.jaccard(data.labels, pred),
                       cramers_v=scoring.cramers_v(data.labels, pred))
    for name, aux in data.aux_labels.items():
        metrics[f"js_{name}"] = scoring.jaccard(aux, pred)
        metrics[f"cramers_v_{name}"] = scoring.cramers_v(aux, pred)

    with Staging(cfg.out) as st:
        _write_json(st.path("config.json"), asdict(cfg))
        _write_json(st.path("model.json"), model_doc)
        _write_json(st.path("metrics.json"), metrics)
        _write_table(st.path("assignment.csv"), rows,
                     ["index", "cluster", "winner_posterior", "sgd_cluster"])
        if pm is not None:
            _write_table(st.path("outliers.csv"), rows, ["index", "outlier_score", "outlier"])
            if data.d == 2:
                P = grid_points(_map_bounds(data.X), cfg.map_resolution)
                probmodel.export_probability_map(pm, P, st.path("probability_map.csv"))
    return metrics


def _write_table(path, rows, columns) -> None:
    cols = [c for c in columns if c in rows]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for i in range(len(rows["index"])):
            w.writerow([_cell(rows[c][i]) for c in cols])


def _cell(v):
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return _fmt(v)


def cmd_sweep(cfg: RunConfig) -> list:
    data = load_dataset(cfg)
    outputs = []
    ratios = cfg.ratios()
    results = []
    for r in ratios:
        res = scoring.sweep(data, cfg.variant, cfg.knn_grid, cfg.eth_grid, cfg.descent_config(),
                            threshold_ratio=r, m=cfg.graph_neighbours, aux_label=cfg.aux_label)
        results.append((r, res))
    with Staging(cfg.out) as st:
        _write_json(st.path("config.json"), asdict(cfg))
        for r, res in results:
            tag = "" if len(ratios) == 1 else f"-r{r:g}"
            scoring.write_sweep(res, st.path(f"sweep{tag}.csv"), st.path(f"candidates{tag}.json"))
            outputs.append(f"sweep{tag}.csv")
    return outputs


def load_model(path):
    with open(path) as fh:
        doc = json.load(fh)
    km = kernel.KernelModel.from_dict(doc["kernel_model"])
    pm = probmodel.ProbabilisticModel(km, tuple(np.asarray(s, dtype=int)
                                                for s in doc["cluster_members"]))
    return doc, pm


def cmd_allocate(model_path, points_csv, out, model_space: bool = False) -> None:
    doc, pm = load_model(model_path)
    raw = _read_points(points_csv)
    d_raw = len(doc["feature_names"]) if model_space else _input_dim(doc, pm.kernel_model.d)
    if raw.shape[1] != d_raw:
        raise ConfigError([f"dimension mismatch: model expects {d_raw} feature columns, "
                           f"{points_csv} has {raw.shape[1]}"])
    X = raw if model_space else dataio.replay(doc["preprocessing"], raw)
    lj = pm.log_joint(X)
    alloc = probmodel.allocate(pm, log_joint=lj)
    scores = probmodel.outlier_scores(pm, log_joint=lj)
    threshold = doc.get("outlier_threshold")
    flags = scores < threshold if threshold is not None else np.zeros(len(scores), bool)
    rows = {"index": np.arange(len(X)), "cluster": alloc.assignment,
            "winner_posterior": alloc.winner_posterior, "outlier_score": scores,
            "outlier": flags.astype(int)}
    with Staging(out) as st:
        _write_table(st.path("allocation.csv"), rows,
                     ["index", "cluster", "winner_posterior", "outlier_score", "outlier"])


def _input_dim(doc, model_d):
    """Number of raw feature columns the preprocessing log expects."""
    for entry in doc["preprocessing"]:
        if entry["op"] in ("standardize", "pca"):
            return len(entry["mean"])
    return model_d


def cmd_score(labels_csv, assignment_csv, label_column="label", cluster_column="cluster") -> dict:
    labels = _read_column(labels_csv, label_column)
    pred = _read_column(assignment_csv, cluster_column)
    if labels.size != pred.size:
        raise ConfigError([f"row count mismatch: {labels.size} labels vs {pred.size} assignments"])
    return {"n": int(labels.size), "js": scoring.jaccard(labels, pred),
            "cramers_v": scoring.cramers_v(labels, pred)}


# ---------------------------------------------------------------------------
# argument handling

def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pqc", description="Probabilistic quantum clustering.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset as CSV")
    g.add_argument("name", choices=sorted(dataio.GENERATORS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="output CSV path")

    for name, helptext in (("fit", "fit one (%%KNN, E_th) setting"),
                           ("sweep", "scan the (%%KNN, E_th) grid")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--config", help="JSON run config")
        s.add_argument("--seed", type=int)
        s.add_argument("--variant", choices=kernel.VARIANTS)
        if name == "fit":
            s.add_argument("--knn", type=float)
            s.add_argument("--eth", type=float)
        else:
            s.add_argument("--knn", type=_float_list, help="comma-separated %%KNN grid")
            s.add_argument("--eth", type=_float_list, help="comma-separated E_th grid")
        s.add_argument("--out", help="output directory")

    a = sub.add_parser("allocate", help="allocate new points with a fitted model (no descent)")
    a.add_argument("model", help="model.json written by fit")
    a.add_argument("points", help="CSV of raw points (non-numeric columns are ignored)")
    a.add_argument("--model-space", action="store_true",
                   help="points are already preprocessed (e.g. a probability-map grid)")
    a.add_argument("--out", required=True, help="output directory")

    sc = sub.add_parser("score", help="Jaccard score and Cramer's V of an assignment")
    sc.add_argument("labels", help="CSV with the true labels")
    sc.add_argument("assignment", help="CSV with predicted clusters")
    sc.add_argument("--label-column", default="label")
    sc.add_argument("--cluster-column", default="cluster")
    sc.add_argument("--out", help="write JSON here instead of stdout")
    return p


def _resolve_config(args) -> RunConfig:
    doc = {}
    if args.config:
        try:
            with open(args.config) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError([f"cannot read config: {exc}"]) from None
        except json.JSONDecodeError as exc:
            raise ConfigError([f"config is not valid JSON: {exc}"]) from None
    cfg = RunConfig.from_dict(doc)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.variant is not None:
        cfg.variant = args.variant
    if args.out is not None:
        cfg.out = args.out
    if args.command == "fit":
        if args.knn is not None:
            cfg.knn = args.knn
        if args.eth is not None:
            cfg.eth = args.eth
    else:
        if args.knn is not None:
            cfg.knn_grid = args.knn
        if args.eth is not None:
            cfg.eth_grid = args.eth
    try:
        cfg.validate(args.command)
    except TypeError as exc:
        raise ConfigError([str(exc)]) from None
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate":
            cmd_generate(args.name, args.seed, args.out)
        elif args.command in ("fit", "sweep"):
            cfg = _resolve_config(args)
            if args.command == "fit":
                metrics = cmd_fit(cfg)
                log.info("K=%s ANLL=%s written to %s", metrics["k"], metrics["anll"], cfg.out)
            else:
                cmd_sweep(cfg)
                log.info("sweep written to %s", cfg.out)
        elif args.command == "allocate":
            cmd_allocate(args.model, args.points, args.out, args.model_space)
        elif args.command == "score":
            doc = cmd_score(args.labels, args.assignment, args.label_column, args.cluster_column)
            if args.out:
                with Staging(Path(args.out).parent) as st:
                    _write_json(st.path(Path(args.out).name), doc)
            else:
                json.dump(doc, sys.stdout, indent=2)
                sys.stdout.write("\n")
    except (ConfigError, dataio.DataError) as exc:
        for msg in getattr(exc, "problems", [str(exc)]):
            log.error("%s", msg)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
