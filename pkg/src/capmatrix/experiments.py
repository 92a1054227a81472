"""Experiment runners: sweeps, model grids, and the consolidated RMSE table.

Every runner takes an :class:`ExperimentConfig`, writes CSV (authoritative)
and optionally SVG into its own subdirectory of the output directory, and
returns the computed results. CSV floats are written with ``repr`` and rows
in a fixed order, so reruns with the same config and seed are byte-identical.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import svg
from .dataset import SPLITS, CellRecord, load_dataset, split_counts
from .evaluation import LOG10_CYCLES, evaluate, rmse_cycles, to_target
from .features import (
    STATISTICS,
    TRANSFORMS,
    DeltaQCache,
    DeltaQConfig,
    FeaturePipeline,
    FeatureSpec,
    FeatureTable,
    element_specs,
    extract_table,
    statistic_grid_specs,
)
from .forest import ForestParams, fit_forest, write_importances
from .linear_models import (
    DEFAULT_ALPHAS,
    DEFAULT_LAMBDAS,
    MAX_COMPONENTS,
    CVConfig,
    DegenerateFeatureWarning,
    FitResult,
    cross_validate,
    default_grid,
    save_model,
)
from .matrix import (
    BASELINE_DIVIDED,
    BASELINE_SUBTRACTED,
    LINEAR,
    VoltageGrid,
    build_capacity_matrix,
    downsample_indices,
    energy_proxy,
    normalize,
    write_matrix,
)

SPLIT_NAMES = tuple(s.value for s in SPLITS)
SUPPRESS_FACTOR = 3.0
LINEAR_METHODS = ("ridge", "enet", "pcr", "plsr")
# log10 statistics that never need abs(); used by the multi-statistic model
POSITIVE_DISPERSION = ("range", "var", "std", "iqr", "idr", "mad")


class ExperimentError(RuntimeError):
    pass


# ---------------------------------------------------------------- config


@dataclass
class ExperimentConfig:
    manifest: Path | None = None
    data_dir: Path | None = None
    output_dir: Path = Path("out")
    seed: int = 0
    grid: VoltageGrid = field(default_factory=VoltageGrid)
    dq_hi: tuple[int, ...] = (100,)
    dq_lo: tuple[int, ...] = (10,)
    avg_hi: tuple[int, ...] = (98, 99, 100)
    avg_lo: tuple[int, ...] = (9, 10, 11)
    resample_method: str = LINEAR
    downsample_counts: tuple[int, ...] = (1000, 500, 200, 100, 40, 20, 10, 5)
    n_elements: int = 100
    n_folds: int = 5
    alphas: tuple[float, ...] = DEFAULT_ALPHAS
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS
    max_components: int = MAX_COMPONENTS
    forest: ForestParams = field(default_factory=ForestParams)
    percentile_step: int = 1
    element_stride: int = 1
    example_cells: tuple[str, ...] | None = None
    example_lives: tuple[float, ...] = (300, 461, 1424, 2160)
    full_matrix_points: int = 1000
    matrix_cells: tuple[str, ...] | None = None
    emit_svg: bool = True
    synth: dict = field(default_factory=dict)

    @property
    def dq(self) -> DeltaQConfig:
        return DeltaQConfig(self.dq_hi, self.dq_lo, self.grid, None, self.resample_method)

    @property
    def dq_averaged(self) -> DeltaQConfig:
        return DeltaQConfig(self.avg_hi, self.avg_lo, self.grid, None, self.resample_method)

    @property
    def cv(self) -> CVConfig:
        return CVConfig(self.n_folds, self.seed)

    def model_grid(self, method: str, n_features: int, n_train: int) -> list[dict]:
        if method == "enet":
            return [{"alpha": float(a), "lambda": float(l)} for a in self.alphas for l in self.lambdas]
        if method == "ridge":
            return [{"lambda": float(l)} for l in self.lambdas]
        grid = default_grid(method, n_features, n_train, self.n_folds)
        return [g for g in grid if g.get("n_components", 0) <= self.max_components] or grid[:1]

    @classmethod
    def from_dict(cls, d: dict, base_dir=".") -> "ExperimentConfig":
        """Build from the JSON layout; relative paths resolve against `base_dir`."""
        base = Path(base_dir)
        known = {
            "dataset", "output_dir", "seed", "grid", "dq", "dq_cycle_averaged", "downsample_counts",
            "n_elements", "cv", "models", "percentile_step", "element_stride", "example_cells",
            "example_lives", "full_matrix_points", "matrix_cells", "emit_svg", "synth",
        }
        unknown = set(d) - known
        if unknown:
            raise ExperimentError(f"unknown config keys: {sorted(unknown)}")

        def path(p):
            return None if p is None else (base / p if not Path(p).is_absolute() else Path(p))

        ds = d.get("dataset", {})
        dq = d.get("dq", {})
        avg = d.get("dq_cycle_averaged", {})
        models = d.get("models", {})
        kw = dict(
            manifest=path(ds.get("manifest")),
            data_dir=path(ds.get("data_dir")),
            output_dir=path(d.get("output_dir", "out")),
            seed=int(d.get("seed", 0)),
            grid=VoltageGrid(**d.get("grid", {})),
            dq_hi=tuple(dq.get("hi", (100,))),
            dq_lo=tuple(dq.get("lo", (10,))),
            avg_hi=tuple(avg.get("hi", (98, 99, 100))),
            avg_lo=tuple(avg.get("lo", (9, 10, 11))),
            resample_method=dq.get("method", LINEAR),
            n_folds=int(d.get("cv", {}).get("n_folds", 5)),
            alphas=tuple(models.get("alphas", DEFAULT_ALPHAS)),
            lambdas=tuple(models.get("lambdas", DEFAULT_LAMBDAS)),
            max_components=int(models.get("max_components", MAX_COMPONENTS)),
            forest=ForestParams(**models.get("forest", {})),
            emit_svg=bool(d.get("emit_svg", True)),
            synth=dict(d.get("synth", {})),
        )
        for key in ("downsample_counts", "example_lives"):
            if key in d:
                kw[key] = tuple(d[key])
        for key in ("n_elements", "percentile_step", "element_stride", "full_matrix_points"):
            if key in d:
                kw[key] = int(d[key])
        for key in ("example_cells", "matrix_cells"):
            if d.get(key) is not None:
                kw[key] = tuple(d[key])
        cfg = cls(**kw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ExperimentError(f"config not found: {path}")
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ExperimentError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d, path.parent)

    def validate(self) -> None:
        if not 1 <= self.percentile_step <= 50:
            raise ExperimentError("percentile_step must be in [1, 50]")
        if self.element_stride < 1:
            raise ExperimentError("element_stride must be >= 1")
        if not 2 <= self.n_elements <= self.grid.n_points:
            raise ExperimentError(f"n_elements must be in [2, {self.grid.n_points}]")
        if any(not 1 <= n <= self.grid.n_points for n in self.downsample_counts):
            raise ExperimentError("downsample counts must lie in [1, grid points]")
        if self.n_folds < 2:
            raise ExperimentError("need at least 2 CV folds")

    def to_dict(self) -> dict:
        return {
            "dataset": {
                "manifest": None if self.manifest is None else str(self.manifest),
                "data_dir": None if self.data_dir is None else str(self.data_dir),
            },
            "output_dir": str(self.output_dir),
            "seed": self.seed,
            "grid": self.grid.to_dict(),
            "dq": {"hi": list(self.dq_hi), "lo": list(self.dq_lo), "method": self.resample_method},
            "dq_cycle_averaged": {"hi": list(self.avg_hi), "lo": list(self.avg_lo)},
            "downsample_counts": list(self.downsample_counts),
            "n_elements": self.n_elements,
            "cv": {"n_folds": self.n_folds},
            "models": {
                "alphas": list(self.alphas),
                "lambdas": list(self.lambdas),
                "max_components": self.max_components,
                "forest": asdict(self.forest),
            },
            "percentile_step": self.percentile_step,
            "element_stride": self.element_stride,
            "example_cells": None if self.example_cells is None else list(self.example_cells),
            "example_lives": list(self.example_lives),
            "full_matrix_points": self.full_matrix_points,
            "matrix_cells": None if self.matrix_cells is None else list(self.matrix_cells),
            "emit_svg": self.emit_svg,
            "synth": dict(self.synth),
        }


# ---------------------------------------------------------------- workspace


class Workspace:
    """Loaded cells plus a ΔQ cache shared by every experiment in one process."""

    def __init__(self, config: ExperimentConfig, cells: Sequence[CellRecord] | None = None):
        self.config = config
        self._cells = None if cells is None else sorted(cells, key=lambda c: c.cell_id)
        self.cache = DeltaQCache()

    @property
    def cells(self) -> list[CellRecord]:
        if self._cells is None:
            m = self.config.manifest
            if m is None:
                raise ExperimentError("config has no dataset.manifest")
            if not Path(m).exists():
                raise ExperimentError(f"manifest not found: {m}")
            if self.config.data_dir is not None and not Path(self.config.data_dir).is_dir():
                raise ExperimentError(f"data_dir not found: {self.config.data_dir}")
            self._cells = sorted(load_dataset(m, self.config.data_dir), key=lambda c: c.cell_id)
        return self._cells

    def table(self, specs, dq: DeltaQConfig) -> FeatureTable:
        return extract_table(self.cells, specs, dq, cache=self.cache)

    def dq_matrix(self, dq: DeltaQConfig) -> tuple[np.ndarray, np.ndarray]:
        """(cells x points ΔQ values, voltages) in cell_id order."""
        vs = [self.cache.get(c, dq) for c in self.cells]
        return np.vstack([v.values for v in vs]), np.array(vs[0].voltages)

    def labels(self) -> tuple[np.ndarray, list[str], np.ndarray]:
        life = np.array([c.label().cycle_life for c in self.cells], dtype=int)
        return life, [c.split.value for c in self.cells], np.array([c.is_outlier for c in self.cells])

    def out(self, *parts) -> Path:
        p = Path(self.config.output_dir, *parts)
        p.mkdir(parents=True, exist_ok=True)
        return p


# ---------------------------------------------------------------- helpers


def _cell(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return str(x)


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(x) for x in r])
    return path


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def _split_rows(splits, outlier, name):
    return np.flatnonzero(np.array([s == name for s in splits]) & ~outlier)


@dataclass
class Labels:
    life: np.ndarray
    splits: list[str]
    outlier: np.ndarray

    @classmethod
    def of(cls, table: FeatureTable) -> "Labels":
        return cls(table.cycle_life, table.splits, table.is_outlier)

    def rows(self, split: str) -> np.ndarray:
        return _split_rows(self.splits, self.outlier, split)


def split_rmse(model, X, labels: Labels) -> dict[str, float]:
    """RMSE in cycles per split present (outliers excluded)."""
    out = {}
    for s in SPLIT_NAMES:
        r = labels.rows(s)
        if r.size:
            out[s] = rmse_cycles(model.predict(X[r]), labels.life[r], model.target_space)
    return out


def fit_scored(
    X, labels: Labels, method: str, cfg: ExperimentConfig, target_space=LOG10_CYCLES, feature_names=None
) -> FitResult:
    """CV-fit `method` on training rows; fill per-split RMSE."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    tr = labels.rows("train")
    if tr.size == 0:
        raise ExperimentError("no training cells")
    y = to_target(labels.life[tr], target_space)
    grid = cfg.model_grid(method, X.shape[1], tr.size)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateFeatureWarning)
        res = cross_validate(X[tr], y, method, grid, cfg.cv, target_space, feature_names)
    res.per_split_rmse = split_rmse(res.model, X, labels)
    return res


def fit_forest_scored(X, labels: Labels, cfg: ExperimentConfig, feature_names=None) -> FitResult:
    tr = labels.rows("train")
    y = to_target(labels.life[tr], LOG10_CYCLES)
    model = fit_forest(X[tr], y, cfg.forest, seed=cfg.seed, feature_names=feature_names)
    res = FitResult(model, "forest", asdict(cfg.forest), float("nan"))
    res.per_split_rmse = split_rmse(model, X, labels)
    return res


def _triple(d: dict) -> list:
    return [d.get(s, float("nan")) for s in SPLIT_NAMES]


def _slope(model) -> float:
    """Standardized-space coefficient of a univariate linear model."""
    return float(model.coefficients[0])


def pipeline_to_dict(p: FeaturePipeline) -> dict:
    return {
        "dq": {
            "hi": list(p.dq.hi),
            "lo": list(p.dq.lo),
            "grid": p.dq.grid.to_dict(),
            "n_downsample": p.dq.n_downsample,
            "method": p.dq.method,
        },
        "specs": [asdict(s) for s in p.specs],
    }


def pipeline_from_dict(d: dict) -> FeaturePipeline:
    dq = d["dq"]
    cfg = DeltaQConfig(tuple(dq["hi"]), tuple(dq["lo"]), VoltageGrid(**dq["grid"]), dq["n_downsample"], dq["method"])
    return FeaturePipeline(cfg, [FeatureSpec(**s) for s in d["specs"]])


def save_fitted(model, pipeline: FeaturePipeline, path) -> Path:
    """Model JSON plus a ``.pipeline.json`` sidecar describing its features."""
    path = Path(path)
    save_model(model, path)
    write_json(path.with_suffix(".pipeline.json"), pipeline_to_dict(pipeline))
    return path


def example_cell_ids(cfg: ExperimentConfig, ws: Workspace) -> list[tuple[str, int, str]]:
    """(cell_id, cycle_life, reason) for the contribution-plot examples.

    Either the configured ids, or the training cells nearest each target life
    plus the training-median cell. Ties go to the lower cell_id.
    """
    by_id = {c.cell_id: c for c in ws.cells}
    if cfg.example_cells is not None:
        missing = [c for c in cfg.example_cells if c not in by_id]
        if missing:
            raise ExperimentError(f"example cells not in dataset: {missing}")
        return [(c, by_id[c].label().cycle_life, "configured") for c in cfg.example_cells]
    train = [c for c in ws.cells if c.split.value == "train" and not c.is_outlier]
    if not train:
        raise ExperimentError("no training cells for examples")
    lives = {c.cell_id: c.label().cycle_life for c in train}
    out, seen = [], set()
    targets = [(float(t), f"nearest to {t:g}") for t in cfg.example_lives]
    targets.append((float(np.median(list(lives.values()))), "training median"))
    for t, why in targets:
        cid = min(lives, key=lambda k: (abs(lives[k] - t), k))
        if cid not in seen:
            seen.add(cid)
            out.append((cid, lives[cid], why))
    return out


# ---------------------------------------------------------------- ingest / matrices


def run_ingest(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    ws = ws or Workspace(cfg)
    d = ws.out("ingest")
    rows = []
    for c in ws.cells:
        lab = c.label()
        rows.append([c.cell_id, c.batch_id, c.split.value, len(c.cycles), lab.cycle_life,
                     lab.log10_cycle_life, "manifest" if c.cycle_life is not None else "computed", c.is_outlier])
    write_csv(d / "cells.csv", ["cell_id", "batch_id", "split", "n_cycles", "cycle_life",
                                "log10_cycle_life", "label_source", "is_outlier"], rows)
    counts = split_counts(ws.cells)
    write_json(d / "split_counts.json", counts)
    return counts


def run_matrices(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    """ΔQ vectors for every cell; full matrices for the selected cells."""
    ws = ws or Workspace(cfg)
    d = ws.out("matrices")
    dq, volts = ws.dq_matrix(cfg.dq)
    ids = [c.cell_id for c in ws.cells]
    write_csv(d / f"{cfg.dq.label}.csv", ["voltage_v", *ids],
              ([float(v), *dq[:, i].tolist()] for i, v in enumerate(volts)))
    chosen = cfg.matrix_cells if cfg.matrix_cells is not None else [c for c, _, _ in example_cell_ids(cfg, ws)]
    by_id = {c.cell_id: c for c in ws.cells}
    energy_rows = []
    for cid in chosen:
        if cid not in by_id:
            raise ExperimentError(f"matrix cell {cid!r} not in dataset")
        raw = build_capacity_matrix(by_id[cid], cfg.grid, method=cfg.resample_method)
        write_matrix(raw, d / f"{cid}_raw.csv")
        sub = normalize(raw, BASELINE_SUBTRACTED)
        write_matrix(sub, d / f"{cid}_{BASELINE_SUBTRACTED}.csv")
        write_matrix(normalize(raw, BASELINE_DIVIDED), d / f"{cid}_{BASELINE_DIVIDED}.csv")
        for n, e in zip(sub.cycles, energy_proxy(sub)):
            energy_rows.append([cid, n, float(e)])
        if cfg.emit_svg:
            idx = downsample_indices(cfg.grid.n_points, min(100, cfg.grid.n_points))
            svg.heatmap(sub.q[idx][::-1], [f"{v:.2f}" for v in cfg.grid.values[idx][::-1]],
                        [str(n) for n in sub.cycles], title=f"{cid} Q(n) - Q(2)",
                        legend_label="Ah", annotate=False, path=d / f"{cid}_{BASELINE_SUBTRACTED}.svg")
    write_csv(d / "energy_proxy.csv", ["cell_id", "cycle", "energy_proxy"], energy_rows)
    if cfg.emit_svg:
        lab = {c.cell_id: c.label().cycle_life for c in ws.cells}
        series = {f"{cid} ({lab[cid]})": (volts, dq[ids.index(cid)]) for cid in chosen}
        svg.line_chart(series, "voltage (V)", f"{cfg.dq.label} (Ah)", "ΔQ curves", path=d / "delta_q.svg")
    return {"n_cells": len(ids), "matrix_cells": list(chosen)}


# ---------------------------------------------------------------- downsampling


def run_downsample_sweep(cfg: ExperimentConfig, ws: Workspace | None = None) -> list[dict]:
    """log10(var ΔQ) model refit on downsampled ΔQ; RMSE change vs full grid."""
    ws = ws or Workspace(cfg)
    d = ws.out("downsample_sweep")
    spec = FeatureSpec("var", "log10")
    counts = sorted(set(cfg.downsample_counts) | {cfg.grid.n_points}, reverse=True)
    results = {}
    for n in counts:
        dq = cfg.dq if n == cfg.grid.n_points else cfg.dq.with_downsample(n)
        try:
            table = ws.table([spec], dq)
            res = fit_scored(table.values, Labels.of(table), "enet", cfg)
            results[n] = (res.per_split_rmse, "")
        except (ValueError, FloatingPointError) as exc:
            results[n] = ({}, str(exc))
    ref = results[cfg.grid.n_points][0]
    if not ref:
        raise ExperimentError(f"reference model failed: {results[cfg.grid.n_points][1]}")
    span = cfg.grid.v_max - cfg.grid.v_min
    out = []
    for n in counts:
        per, reason = results[n]
        for s in SPLIT_NAMES:
            if s not in ref:
                continue
            r = per.get(s, float("nan"))
            out.append({
                "n_points": n,
                "spacing_mv": 1000 * span / (n - 1) if n > 1 else float("nan"),
                "split": s,
                "rmse_cycles": r,
                "delta_rmse_pct": 100.0 * (r - ref[s]) / ref[s],
                "reason": reason,
            })
    keys = ["n_points", "spacing_mv", "split", "rmse_cycles", "delta_rmse_pct", "reason"]
    write_csv(d / "downsample_sweep.csv", keys, ([r[k] for k in keys] for r in out))
    if cfg.emit_svg:
        series = {}
        for s in SPLIT_NAMES:
            pts = [(r["spacing_mv"], r["delta_rmse_pct"]) for r in out if r["split"] == s and r["n_points"] > 1]
            if pts:
                series[s] = (np.log10([p[0] for p in pts]), [p[1] for p in pts])
        svg.line_chart(series, "log10 spacing (mV)", "ΔRMSE (%)", "Downsampling sensitivity",
                       hlines=(-1.0, 1.0), path=d / "downsample_sweep.svg")
    return out


# ---------------------------------------------------------------- univariate grid


def suppression_mask(rmse: np.ndarray, factor: float = SUPPRESS_FACTOR) -> np.ndarray:
    """True where RMSE is missing or exceeds `factor` x the median of finite cells."""
    finite = np.isfinite(rmse)
    if not finite.any():
        return np.ones_like(rmse, dtype=bool)
    med = float(np.median(rmse[finite]))
    return ~finite | (rmse > factor * med)


def run_univariate_grid(
    cfg: ExperimentConfig,
    target_space: str = LOG10_CYCLES,
    cycle_averaged: bool = False,
    ws: Workspace | None = None,
) -> dict:
    """14 statistics x 4 transforms, one CV elastic net per cell.

    Returns ``{"rmse": {split: array}, "suppressed": {split: mask}, "reasons": array, "specs": list}``.
    """
    ws = ws or Workspace(cfg)
    dq = cfg.dq_averaged if cycle_averaged else cfg.dq
    tag = f"{'log10' if target_space == LOG10_CYCLES else 'cycles'}_target_{dq.label.replace(':', '_')}"
    d = ws.out("univariate_grid", tag)
    ns, nt = len(STATISTICS), len(TRANSFORMS)
    rmse = {s: np.full((ns, nt), np.nan) for s in SPLIT_NAMES}
    reasons = np.full((ns, nt), "", dtype=object)
    specs = statistic_grid_specs()
    long_rows = []
    for k, spec in enumerate(specs):
        i, j = divmod(k, nt)
        hp, cv = {}, float("nan")
        try:
            table = ws.table([spec], dq)
            res = fit_scored(table.values, Labels.of(table), "enet", cfg, target_space, table.feature_names)
            for s, r in res.per_split_rmse.items():
                rmse[s][i, j] = r
            hp, cv = res.chosen_hyperparameters, res.cv_rmse
        except (ValueError, FloatingPointError) as exc:
            reasons[i, j] = f"fit failed: {exc}"
        long_rows.append([spec.statistic, spec.transformation, spec.label, spec.name,
                          hp.get("alpha"), hp.get("lambda"), cv])
    present = [s for s in SPLIT_NAMES if np.isfinite(rmse[s]).any()]
    suppressed = {}
    for s in present:
        suppressed[s] = suppression_mask(rmse[s])
    rows = []
    for k, spec in enumerate(specs):
        i, j = divmod(k, nt)
        base = long_rows[k]
        for s in present:
            r = rmse[s][i, j]
            why = reasons[i, j] or (f"rmse above {SUPPRESS_FACTOR:g}x grid median" if suppressed[s][i, j] else "")
            rows.append(base[:4] + [s, r, suppressed[s][i, j], why] + base[4:])
    write_csv(d / "grid_long.csv", ["statistic", "transformation", "label", "feature", "split", "rmse_cycles",
                                     "suppressed", "reason", "alpha", "lambda", "cv_rmse"], rows)
    row_labels = [FeatureSpec(st).label for st in STATISTICS]
    for s in present:
        write_csv(d / f"raw_{s}.csv", ["statistic", *TRANSFORMS],
                  ([row_labels[i], *rmse[s][i].tolist()] for i in range(ns)))
        write_csv(d / f"display_{s}.csv", ["statistic", *TRANSFORMS],
                  ([row_labels[i], *["–" if suppressed[s][i, j] else repr(float(rmse[s][i, j])) for j in range(nt)]]
                   for i in range(ns)))
        if cfg.emit_svg:
            svg.heatmap(rmse[s], row_labels, list(TRANSFORMS), title=f"{s} RMSE ({tag})",
                        legend_label="cycles", suppressed=suppressed[s], path=d / f"heatmap_{s}.svg")
    return {"rmse": rmse, "suppressed": suppressed, "reasons": reasons, "specs": specs, "splits": present}


# ---------------------------------------------------------------- percentile sweep


def percentile_table(dq_values: np.ndarray, pcts: np.ndarray) -> np.ndarray:
    """cells x len(pcts) matrix of linear-interpolated percentiles."""
    return np.percentile(dq_values, pcts, axis=1, method="linear").T


def run_percentile_sweep(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    """RMSE of log10(percentile-range) models for every lower <= upper pair."""
    ws = ws or Workspace(cfg)
    d = ws.out("percentile_sweep")
    dq_vals, volts = ws.dq_matrix(cfg.dq)
    life, splits, outl = ws.labels()
    labels = Labels(life, splits, outl)
    pcts = np.arange(0, 101, cfg.percentile_step)
    if pcts[-1] != 100:
        pcts = np.append(pcts, 100)
    P = percentile_table(dq_vals, pcts)
    npct = pcts.size
    rmse = {s: np.full((npct, npct), np.nan) for s in SPLIT_NAMES}
    rows = []
    for a in range(npct):
        for b in range(a, npct):
            lo, hi = float(pcts[a]), float(pcts[b])
            # same abs policy as FeatureSpec: only the diagonal can be negative
            raw = P[:, a] if a == b else P[:, b] - P[:, a]
            x = np.abs(raw)
            reason = ""
            per = {}
            if np.any(x <= 0):
                reason = "log10 of zero feature"
            else:
                try:
                    res = fit_scored(np.log10(x), labels, "enet", cfg)
                    per = res.per_split_rmse
                except (ValueError, FloatingPointError) as exc:
                    reason = f"fit failed: {exc}"
            for s in SPLIT_NAMES:
                if s in per:
                    rmse[s][a, b] = per[s]
            rows.append([lo, hi, *_triple(per), reason])
    write_csv(d / "percentile_sweep.csv", ["lower_pct", "upper_pct", *[f"rmse_{s}" for s in SPLIT_NAMES], "reason"], rows)

    summary = {}
    tr = rmse["train"]
    if np.isfinite(tr).any():
        a, b = np.unravel_index(np.nanargmin(np.where(np.isfinite(tr), tr, np.inf)), tr.shape)
        summary["train_optimum"] = {"lower_pct": float(pcts[a]), "upper_pct": float(pcts[b]),
                                    **{s: float(rmse[s][a, b]) for s in SPLIT_NAMES}}
    write_json(d / "summary.json", summary)

    # ΔQ curves with marked percentile levels, for the example cells
    marks = [(31.0, 62.0), (25.0, 75.0)]
    ex = example_cell_ids(cfg, ws)
    ids = [c.cell_id for c in ws.cells]
    curve_rows, point_rows = [], []
    for cid, clife, _ in ex:
        v = dq_vals[ids.index(cid)]
        for volt, q in zip(volts, v):
            curve_rows.append([cid, clife, float(volt), float(q)])
        for pair in marks:
            for pct in pair:
                val = float(np.percentile(v, pct, method="linear"))
                k = int(np.argmin(np.abs(v - val)))
                point_rows.append([cid, clife, f"{pair[0]:g}-{pair[1]:g}", pct, val, float(volts[k])])
    write_csv(d / "percentile_curves.csv", ["cell_id", "cycle_life", "voltage_v", "delta_q_ah"], curve_rows)
    write_csv(d / "percentile_points.csv", ["cell_id", "cycle_life", "pair", "percentile", "delta_q_ah",
                                            "nearest_voltage_v"], point_rows)
    if cfg.emit_svg:
        lab = [f"{p:g}" for p in pcts]
        for s in SPLIT_NAMES:
            if np.isfinite(rmse[s]).any():
                svg.heatmap(rmse[s], lab, lab, title=f"{s} RMSE by percentile bounds",
                            legend_label="cycles", annotate=False, path=d / f"heatmap_{s}.svg")
    return {"pcts": pcts, "rmse": rmse, "summary": summary}


# ---------------------------------------------------------------- single-element sweep


def _transform_column(x: np.ndarray, t: str) -> np.ndarray:
    # vector form of apply_transform with the abs policy for signed elements
    if t == "identity":
        return x
    if t == "cbrt":
        return np.cbrt(x)
    if t == "sqrt":
        return np.sqrt(np.abs(x))
    with np.errstate(divide="ignore"):
        return np.log10(np.abs(x))


def run_single_element_sweep(
    cfg: ExperimentConfig, ws: Workspace | None = None, transforms: Sequence[str] = TRANSFORMS
) -> dict:
    """One CV univariate fit per grid voltage per transform.

    Slopes are standardized-space coefficients; sigma is the population
    standard deviation of the raw ΔQ element over training cells.
    """
    ws = ws or Workspace(cfg)
    d = ws.out("element_sweep")
    dq_vals, volts = ws.dq_matrix(cfg.dq)
    life, splits, outl = ws.labels()
    labels = Labels(life, splits, outl)
    idx = np.arange(0, volts.size, cfg.element_stride)
    tr = labels.rows("train")
    sigma = dq_vals[tr][:, idx].std(axis=0)
    rmse = {t: {s: np.full(idx.size, np.nan) for s in SPLIT_NAMES} for t in transforms}
    slope = {t: np.full(idx.size, np.nan) for t in transforms}
    reason = {t: np.full(idx.size, "", dtype=object) for t in transforms}
    for t in transforms:
        for k, i in enumerate(idx):
            x = _transform_column(dq_vals[:, i], t)
            if not np.all(np.isfinite(x)):
                reason[t][k] = f"{t} undefined (zero element)"
                continue
            try:
                res = fit_scored(x, labels, "enet", cfg)
            except (ValueError, FloatingPointError) as exc:
                reason[t][k] = f"fit failed: {exc}"
                continue
            slope[t][k] = _slope(res.model)
            for s, r in res.per_split_rmse.items():
                rmse[t][s][k] = r
    header = ["voltage_v", "train_sigma"]
    for t in transforms:
        header += [f"rmse_{s}_{t}" for s in SPLIT_NAMES] + [f"slope_{t}", f"reason_{t}"]
    if "log10" in transforms:
        header.append("slope_over_sigma_log10")
    rows = []
    for k, i in enumerate(idx):
        r = [float(volts[i]), float(sigma[k])]
        for t in transforms:
            r += [rmse[t][s][k] for s in SPLIT_NAMES] + [slope[t][k], reason[t][k]]
        if "log10" in transforms:
            r.append(slope["log10"][k] / sigma[k] if sigma[k] > 0 else float("nan"))
        rows.append(r)
    write_csv(d / "element_sweep.csv", header, rows)

    summary = {}
    for t in transforms:
        trr = rmse[t]["train"]
        if np.isfinite(trr).any():
            k = int(np.argmin(np.where(np.isfinite(trr), trr, np.inf)))  # lowest voltage on ties
            summary[t] = {"train_optimal_voltage": float(volts[idx[k]]),
                          **{s: float(rmse[t][s][k]) for s in SPLIT_NAMES}}
    if "log10" in transforms and np.isfinite(slope["log10"]).any():
        sl = np.where(np.isfinite(slope["log10"]), slope["log10"], np.inf)
        k = int(np.argmin(sl))
        summary["log10_slope_min"] = {"voltage": float(volts[idx[k]]), "slope": float(slope["log10"][k])}
        k = int(np.argmax(np.where(np.isfinite(slope["log10"]), np.abs(slope["log10"]), -np.inf)))
        summary["log10_slope_abs_max"] = {"voltage": float(volts[idx[k]]), "slope": float(slope["log10"][k])}
    write_json(d / "summary.json", summary)
    if cfg.emit_svg:
        v = volts[idx]
        for s in SPLIT_NAMES:
            series = {t: (v, rmse[t][s]) for t in transforms if np.isfinite(rmse[t][s]).any()}
            if series:
                svg.line_chart(series, "voltage (V)", "RMSE (cycles)", f"{s} single-element RMSE",
                               path=d / f"rmse_{s}.svg")
        svg.line_chart({t: (v, slope[t]) for t in transforms}, "voltage (V)", "standardized slope",
                       "Slope", path=d / "slope.svg")
        svg.line_chart({"sigma": (v, sigma)}, "voltage (V)", "Ah", "Training sigma", path=d / "sigma.svg")
        if "log10" in transforms:
            with np.errstate(divide="ignore", invalid="ignore"):
                svg.line_chart({"log10": (v, slope["log10"] / sigma)}, "voltage (V)", "slope / sigma",
                               "Slope over sigma", path=d / "slope_over_sigma.svg")
    return {"voltages": volts[idx], "rmse": rmse, "slope": slope, "sigma": sigma, "summary": summary}


# ---------------------------------------------------------------- multivariate


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return float("nan")
    return float(a @ b / (na * nb))


def run_multivariate(cfg: ExperimentConfig, cycle_averaged: bool = False, ws: Workspace | None = None) -> dict:
    """Ridge, elastic net, PCR, PLSR and a random forest on downsampled ΔQ elements."""
    ws = ws or Workspace(cfg)
    dq = (cfg.dq_averaged if cycle_averaged else cfg.dq).with_downsample(cfg.n_elements)
    d = ws.out("multivariate", dq.full().label.replace(":", "_"))
    specs = element_specs(dq)
    pipeline = FeaturePipeline(dq, specs, ws.cache)
    table = ws.table(specs, dq)
    labels = Labels.of(table)
    volts = np.array([s.voltage for s in specs])
    X = table.values
    fits: dict[str, FitResult] = {}
    for m in LINEAR_METHODS:
        fits[m] = fit_scored(X, labels, m, cfg, feature_names=table.feature_names)
    fits["forest"] = fit_forest_scored(X, labels, cfg, table.feature_names)

    rows = []
    for m, res in fits.items():
        save_fitted(res.model, pipeline, d / "models" / f"{m}.json")
        rep = evaluate(res.model, ws.cells, pipeline, m)
        # report via eval so the numbers round-trip through the saved model
        res.per_split_rmse = {s: rep.rmse(s) for s in rep.per_split}
        rows.append([m, json.dumps(res.chosen_hyperparameters, sort_keys=True), res.cv_rmse,
                     *_triple(res.per_split_rmse)])
        if res.cv_table:
            keys = sorted({k for r in res.cv_table for k in r})
            write_csv(d / f"cv_{m}.csv", keys, ([r.get(k) for k in keys] for r in res.cv_table))
    write_csv(d / "rmse.csv", ["model", "hyperparameters", "cv_rmse", *[f"rmse_{s}" for s in SPLIT_NAMES]], rows)

    coefs = {m: fits[m].model.coefficients for m in LINEAR_METHODS}
    write_csv(d / "coefficients.csv", ["voltage_v", *LINEAR_METHODS],
              ([float(v), *[coefs[m][i] for m in LINEAR_METHODS]] for i, v in enumerate(volts)))
    write_importances(fits["forest"].model, volts, d / "forest_importances.csv")
    cos_rows, cos = [], {}
    for i, a in enumerate(LINEAR_METHODS):
        for b in LINEAR_METHODS[i + 1:]:
            c = cosine_similarity(coefs[a], coefs[b])
            cos[(a, b)] = c
            cos_rows.append([a, b, c])
    write_csv(d / "coefficient_cosine.csv", ["model_a", "model_b", "cosine_similarity"], cos_rows)

    # element-wise PLSR contributions for the example cells
    plsr = fits["plsr"].model
    ex = example_cell_ids(cfg, ws)
    pos = {cid: i for i, cid in enumerate(table.cell_ids)}
    contrib_rows, contrib = [], {}
    for cid, clife, why in ex:
        x = X[pos[cid]][None, :]
        z = np.zeros(X.shape[1])
        z[plsr.standardizer.keep] = plsr.standardizer.transform(x)[0]
        prod = plsr.contributions(x)[0]
        contrib[cid] = prod
        for v, zi, ci, pi in zip(volts, z, plsr.coefficients, prod):
            contrib_rows.append([cid, clife, why, float(v), float(zi), float(ci), float(pi)])
    write_csv(d / "plsr_contributions.csv", ["cell_id", "cycle_life", "selection", "voltage_v",
                                             "standardized_feature", "coefficient", "product"], contrib_rows)
    if cfg.emit_svg:
        svg.line_chart({m: (volts, coefs[m]) for m in LINEAR_METHODS}, "voltage (V)", "standardized coefficient",
                       "Coefficients", path=d / "coefficients.svg")
        svg.line_chart({"forest": (volts, fits["forest"].model.importances)}, "voltage (V)", "importance",
                       "Forest importances", path=d / "forest_importances.svg")
        svg.line_chart({f"{cid} ({cl})": (volts, contrib[cid]) for cid, cl, _ in ex}, "voltage (V)",
                       "coefficient x standardized ΔQ", "PLSR contributions", path=d / "plsr_contributions.svg")
        names = list(fits)
        svg.bar_chart(list(SPLIT_NAMES), {m: _triple(fits[m].per_split_rmse) for m in names},
                      "RMSE (cycles)", "Multivariate models", path=d / "rmse.svg")
    return {"fits": fits, "voltages": volts, "cosine": cos, "table": table, "pipeline": pipeline}


# ---------------------------------------------------------------- negative results


def horizontal_slice_features(mats: Sequence, train_mask: np.ndarray) -> tuple[int, np.ndarray]:
    """Pick the voltage row whose Qn - Q2 trend has the largest mean |slope|
    over training cells; return (row, per-cell [slope, intercept])."""
    cycles = np.asarray(mats[0].cycles, dtype=float)
    A = np.column_stack([cycles, np.ones_like(cycles)])
    pinv = np.linalg.pinv(A)  # 2 x n_cycles
    fits = np.stack([m.q @ pinv.T for m in mats])  # cells x voltages x 2
    mean_slope = fits[train_mask, :, 0].mean(axis=0)
    row = int(np.argmax(np.abs(mean_slope)))
    return row, fits[:, row, :]


def run_negative_results(cfg: ExperimentConfig, ws: Workspace | None = None) -> dict:
    ws = ws or Workspace(cfg)
    d = ws.out("negative_results")
    life, splits, outl = ws.labels()
    labels = Labels(life, splits, outl)
    train_mask = np.zeros(len(life), dtype=bool)
    train_mask[labels.rows("train")] = True
    report = {}

    mats = [normalize(build_capacity_matrix(c, cfg.grid, 2, 100, cfg.resample_method), BASELINE_SUBTRACTED)
            for c in ws.cells]
    row, sl = horizontal_slice_features(mats, train_mask)
    res = fit_scored(sl, labels, "enet", cfg, feature_names=["slope", "intercept"])
    report["horizontal_slice"] = {"voltage_v": float(cfg.grid.values[row]),
                                  "hyperparameters": res.chosen_hyperparameters, **res.per_split_rmse}

    flat = np.stack([m.q.ravel() for m in mats])
    keep = downsample_indices(flat.shape[1], min(cfg.full_matrix_points, flat.shape[1]))
    res = fit_scored(flat[:, keep], labels, "enet", cfg)
    report["full_matrix"] = {"n_features": int(keep.size), "hyperparameters": res.chosen_hyperparameters,
                             **res.per_split_rmse}
    del mats, flat

    specs = [FeatureSpec(s, "log10") for s in POSITIVE_DISPERSION]
    table = ws.table(specs, cfg.dq)
    res = fit_scored(table.values, Labels.of(table), "enet", cfg, feature_names=table.feature_names)
    tr = Labels.of(table).rows("train")
    corr = np.corrcoef(table.values[tr], rowvar=False)
    upper = corr[np.triu_indices_from(corr, k=1)]
    report["multi_statistic"] = {"features": table.feature_names, "hyperparameters": res.chosen_hyperparameters,
                                 "median_feature_correlation": float(np.median(upper)), **res.per_split_rmse}
    write_json(d / "negative_results.json", report)
    write_csv(d / "negative_results.csv", ["procedure", *[f"rmse_{s}" for s in SPLIT_NAMES]],
              ([k, *_triple(v)] for k, v in report.items()))
    return report


# ---------------------------------------------------------------- consolidated table


def run_table2(cfg: ExperimentConfig, ws: Workspace | None = None) -> list[dict]:
    """Train / primary / secondary RMSE for every implemented model."""
    ws = ws or Workspace(cfg)
    d = ws.out("table2")
    sweep = run_single_element_sweep(cfg, ws, transforms=("log10",))
    if "log10" not in sweep["summary"]:
        raise ExperimentError("single-element sweep produced no usable voltage")
    v_opt = sweep["summary"]["log10"]["train_optimal_voltage"]
    univariate = [
        ("variance", FeatureSpec("var", "log10")),
        ("iqr", FeatureSpec("iqr", "log10")),
        ("percentile_31_62", FeatureSpec("percentile_range", "log10", lower_pct=31, upper_pct=62)),
        (f"single_element_{v_opt:.4f}V", FeatureSpec("value_at_v", "log10", voltage=v_opt)),
    ]
    rows = []
    for name, spec in univariate:
        pipe = FeaturePipeline(cfg.dq, [spec], ws.cache)
        table = ws.table([spec], cfg.dq)
        res = fit_scored(table.values, Labels.of(table), "enet", cfg, feature_names=table.feature_names)
        save_fitted(res.model, pipe, d / "models" / f"{name}.json")
        rep = evaluate(res.model, ws.cells, pipe, name)
        rows.append({"model": name, "feature": spec.name, "hyperparameters": res.chosen_hyperparameters,
                     **{s: rep.rmse(s) for s in rep.per_split}})
    multi = run_multivariate(cfg, ws=ws)
    for m, res in multi["fits"].items():
        save_fitted(res.model, multi["pipeline"], d / "models" / f"{m}.json")
        rows.append({"model": m, "feature": f"{cfg.n_elements} ΔQ elements",
                     "hyperparameters": res.chosen_hyperparameters, **res.per_split_rmse})
    write_csv(d / "table2.csv", ["model", "feature", "hyperparameters", *[f"rmse_{s}" for s in SPLIT_NAMES]],
              ([r["model"], r["feature"], json.dumps(r["hyperparameters"], sort_keys=True),
                *_triple(r)] for r in rows))
    if cfg.emit_svg:
        svg.bar_chart(list(SPLIT_NAMES), {r["model"]: _triple(r) for r in rows}, "RMSE (cycles)",
                      "Model comparison", path=d / "table2.svg", width=760)
    return rows
