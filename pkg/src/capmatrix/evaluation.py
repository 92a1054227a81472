"""Error metrics in cycles and split-aware model scoring."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import SPLITS, CellRecord

LOG10_CYCLES = "log10_cycles"
CYCLES = "cycles"
TARGET_SPACES = (LOG10_CYCLES, CYCLES)


def to_target(cycle_life, target_space: str) -> np.ndarray:
    life = np.asarray(cycle_life, dtype=float)
    if target_space == LOG10_CYCLES:
        return np.log10(life)
    if target_space == CYCLES:
        return life
    raise ValueError(f"unknown target space {target_space!r}")


def to_cycles(predictions, target_space: str) -> np.ndarray:
    """Back-transform model outputs to cycles (10**y for log-space models)."""
    p = np.asarray(predictions, dtype=float)
    if target_space == LOG10_CYCLES:
        return 10.0**p
    if target_space == CYCLES:
        return p
    raise ValueError(f"unknown target space {target_space!r}")


def _check(predictions, actual):
    p = np.asarray(predictions, dtype=float).ravel()
    a = np.asarray(actual, dtype=float).ravel()
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {a.size} actual values")
    if p.size == 0:
        raise ValueError("no values to score")
    if np.any(a <= 0):
        raise ValueError("actual cycle life must be positive")
    return p, a


def rmse_cycles(predictions, actual_cycle_life, target_space: str = LOG10_CYCLES) -> float:
    p, a = _check(predictions, actual_cycle_life)
    err = to_cycles(p, target_space) - a
    return float(np.sqrt(np.mean(err * err)))


def mape(predictions, actual_cycle_life, target_space: str = LOG10_CYCLES) -> float:
    """Mean absolute percentage error, in percent. Reported, never used for selection."""
    p, a = _check(predictions, actual_cycle_life)
    return float(100.0 * np.mean(np.abs(to_cycles(p, target_space) - a) / a))


@dataclass
class SplitScore:
    rmse_cycles: float
    mape_pct: float
    n_cells: int


@dataclass
class EvalReport:
    model_name: str
    target_space: str
    per_split: dict[str, SplitScore] = field(default_factory=dict)
    excluded_cells: list[str] = field(default_factory=list)
    predictions: dict[str, float] = field(default_factory=dict)

    def rmse(self, split: str) -> float:
        return self.per_split[split].rmse_cycles

    def triple(self) -> tuple[float, ...]:
        return tuple(self.per_split[s.value].rmse_cycles if s.value in self.per_split else float("nan") for s in SPLITS)

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "target_space": self.target_space,
            "per_split": {k: vars(v) for k, v in self.per_split.items()},
            "excluded_cells": list(self.excluded_cells),
            "predictions_cycles": dict(self.predictions),
        }

    def to_json(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2))
        return path


def write_reports_csv(reports: Sequence[EvalReport], path) -> Path:
    """One row per model x split."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "target_space", "split", "rmse_cycles", "mape_pct", "n_cells"])
        for r in reports:
            for split, s in r.per_split.items():
                w.writerow([r.model_name, r.target_space, split, repr(s.rmse_cycles), repr(s.mape_pct), s.n_cells])
    return path


def evaluate(
    model,
    cells: Sequence[CellRecord],
    pipeline,
    model_name: str = "model",
    exclude_outliers: bool = True,
) -> EvalReport:
    """Score `model` on every split present in `cells`.

    `pipeline` maps cells to a feature matrix via ``transform(cells)``; the
    model supplies ``predict`` and ``target_space``. Outlier cells are listed
    in ``excluded_cells`` and left out of the metrics. Empty splits are omitted.
    """
    cells = sorted(cells, key=lambda c: c.cell_id)
    lives = []
    for c in cells:
        try:
            lives.append(c.label().cycle_life)
        except ValueError as exc:
            raise ValueError(f"cell {c.cell_id} has no usable cycle-life label: {exc}") from exc
    excluded = [c.cell_id for c in cells if c.is_outlier] if exclude_outliers else []
    kept = [i for i, c in enumerate(cells) if not (exclude_outliers and c.is_outlier)]
    report = EvalReport(model_name, model.target_space, excluded_cells=excluded)
    if not kept:
        return report
    X = pipeline.transform([cells[i] for i in kept])
    pred = np.asarray(model.predict(X), dtype=float)
    for j, i in enumerate(kept):
        report.predictions[cells[i].cell_id] = float(to_cycles(pred[j], model.target_space))
    for split in SPLITS:
        rows = [j for j, i in enumerate(kept) if cells[i].split == split]
        if not rows:
            continue
        actual = [lives[kept[j]] for j in rows]
        report.per_split[split.value] = SplitScore(
            rmse_cycles(pred[rows], actual, model.target_space),
            mape(pred[rows], actual, model.target_space),
            len(rows),
        )
    return report
