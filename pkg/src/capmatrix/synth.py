"""Synthetic degradation datasets with known ground truth.

Each cell draws a log-normal dispersion D and an independent link residual
eps, giving a cycle life L with

    log10(L) = a * log10(D) + b + eps.

The per-cell degradation severity is then solved so that the variance of the
cell's ΔQ100-10(V), as measured by the regular resampling pipeline on the
default grid, equals D.

Discharge curves for cycles 1..100 come from a monotone base curve Q(V)
deformed with cycle number; after cycle 100 a power-law fade drives total
capacity below 80 % of nominal at exactly cycle L.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .dataset import SPLITS, CellRecord, CyclePoints, write_dataset
from .matrix import VoltageGrid, resample_cycle

SHOULDER = "shoulder"
POLYNOMIAL = "polynomial"

_Q0 = 1.075  # Ah at 2.0 V, fresh cell
_TOP_FRACTION = 0.005  # capacity left at 3.6 V keeps ΔQ strictly negative
_FADE_PER_SEVERITY = 0.02
_SHIFT_PER_SEVERITY = 0.02  # V
_SEVERITY_MAX = {SHOULDER: 5.0, POLYNOMIAL: 1.5}
_TAIL_EXPONENT = 2.0
_TAIL_MARGIN = 1e-6
_TAIL_EXTRA = 10
_TAIL_VOLTAGES = np.array([3.6, 3.2, 2.6, 2.0])


@dataclass(frozen=True)
class SynthScenario:
    n_train: int = 40
    n_primary_test: int = 40
    n_secondary_test: int = 40
    life_median: float = 800.0
    life_log10_sd: float = 0.2
    life_min: int = 150
    link_slope: float = -0.5
    link_intercept: float = 0.8
    link_sigma: float = 0.05
    shape: str = SHOULDER
    measurement_noise: float = 1e-4  # relative per-cycle capacity gain jitter
    tail_noise: float = 0.0  # Ah, on post-cycle-100 total capacities
    points_per_cycle: int = 300
    nominal_capacity_ah: float = 1.1
    include_cycle_1: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.shape not in (SHOULDER, POLYNOMIAL):
            raise ValueError(f"unknown shape model {self.shape!r}")
        if self.life_min <= 100 or self.life_median < self.life_min:
            raise ValueError(
                f"infeasible scenario: cycle lives must exceed 100 (life_min={self.life_min}, "
                f"median={self.life_median})"
            )
        if self.link_slope == 0:
            raise ValueError("link slope must be nonzero")
        if self.link_sigma < 0 or self.link_sigma > self.life_log10_sd:
            raise ValueError("infeasible scenario: link_sigma must lie in [0, life_log10_sd]")
        if self.points_per_cycle < 4:
            raise ValueError("need at least 4 points per cycle")
        if min(self.n_train, self.n_primary_test, self.n_secondary_test) < 0:
            raise ValueError("split sizes must be non-negative")


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _shoulder_fraction(v):
    u = (v - 2.0) / 1.6
    return (
        0.02 * (1.0 - u)
        + 0.55 * (1.0 - _sig((v - 3.22) / 0.02))
        + 0.30 * (1.0 - _sig((v - 3.05) / 0.06))
        + 0.13 * (1.0 - _sig((v - 2.6) / 0.2))
    )


_F_LO = float(_shoulder_fraction(np.array(2.0)))
_F_HI = float(_shoulder_fraction(np.array(3.6)))


def base_capacity(v, shape: str = SHOULDER) -> np.ndarray:
    """Fresh-cell discharge capacity (Ah) reached when the voltage falls to `v`."""
    v = np.asarray(v, dtype=float)
    if shape == SHOULDER:
        f = (_shoulder_fraction(v) - _F_HI) / (_F_LO - _F_HI)
    else:
        f = (3.6 - v) / 1.6
    return _Q0 * (_TOP_FRACTION + (1.0 - _TOP_FRACTION) * f)


def poly_shape(v) -> np.ndarray:
    """Cubic in normalized voltage, strictly positive on [2.0, 3.6] V."""
    u = (np.asarray(v, dtype=float) - 2.0) / 1.6
    return 0.05 + 1.2 * u * (1.0 - u) + 0.3 * u**3


def progress(n) -> np.ndarray:
    """Degradation progress: 0 at cycle 10, 1 at cycle 100."""
    return (np.asarray(n, dtype=float) - 10.0) / 90.0


def curve(v, cycle: int, severity: float, shape: str = SHOULDER) -> np.ndarray:
    """Noise-free capacity at voltages `v` for a given cycle; non-increasing in v."""
    s = severity * float(progress(cycle))
    if shape == SHOULDER:
        return (1.0 - _FADE_PER_SEVERITY * s) * base_capacity(v + _SHIFT_PER_SEVERITY * s, shape)
    return base_capacity(v, shape) - s * poly_shape(v)


def _sample_voltages(n: int) -> np.ndarray:
    # discharge order: 3.6 V down to 2.0 V
    v = np.linspace(3.6, 2.0, n)
    v.setflags(write=False)
    return v


def measured_dispersion(severity: float, shape: str, volts: np.ndarray, grid: VoltageGrid) -> float:
    """var(ΔQ100-10) as the resampling pipeline sees noise-free sampled curves."""
    hi = resample_cycle(CyclePoints(100, volts, curve(volts, 100, severity, shape)), grid)
    lo = resample_cycle(CyclePoints(10, volts, curve(volts, 10, severity, shape)), grid)
    return float(np.var(hi - lo, ddof=1))


def solve_severity(target: float, shape: str, volts: np.ndarray, grid: VoltageGrid) -> float:
    smax = _SEVERITY_MAX[shape]
    top = measured_dispersion(smax, shape, volts, grid)
    if not 0 < target < top:
        raise ValueError(
            f"infeasible scenario: dispersion {target:.3g} outside reachable range (0, {top:.3g})"
        )
    return brentq(lambda s: measured_dispersion(s, shape, volts, grid) - target, 0.0, smax, xtol=1e-15, rtol=4 * np.finfo(float).eps)


def _draw_link(rng, sc: SynthScenario) -> tuple[int, float, float]:
    """(cycle life, log10 dispersion, eps) with eps independent of the dispersion.

    log10(dispersion) is normal with the spread that makes log10(life) carry
    the scenario's median and standard deviation once eps is added.
    """
    mu = math.log10(sc.life_median)
    sd_x = math.sqrt(sc.life_log10_sd**2 - sc.link_sigma**2) / abs(sc.link_slope)
    mu_x = (mu - sc.link_intercept) / sc.link_slope
    for _ in range(10_000):
        x = float(rng.normal(mu_x, sd_x))
        eps = float(rng.normal(0.0, sc.link_sigma)) if sc.link_sigma > 0 else 0.0
        life = int(round(10 ** (sc.link_slope * x + sc.link_intercept + eps)))
        if life >= sc.life_min:
            return life, x, eps
    raise ValueError("infeasible scenario: cannot draw cycle lives above life_min")


def tail_capacities(c100: float, life: int, threshold: float, last: int) -> np.ndarray:
    """Total capacity for cycles 101..last; first drops below `threshold` at `life`."""
    n = np.arange(101, last + 1, dtype=float)
    depth = c100 - threshold + _TAIL_MARGIN
    return c100 - depth * ((n - 100.0) / (life - 100.0)) ** _TAIL_EXPONENT


def _generate_cell(cell_id, split, batch, sc: SynthScenario, rng, volts, grid):
    life, log_disp, eps = _draw_link(rng, sc)
    target = 10**log_disp
    severity = solve_severity(target, sc.shape, volts, grid)

    cycles = []
    first = 1 if sc.include_cycle_1 else 2
    gains = 1.0 + sc.measurement_noise * rng.standard_normal(101)
    for n in range(first, 101):
        q = curve(volts, n, severity, sc.shape)
        if sc.measurement_noise > 0:
            q = q * gains[n]
        cycles.append(CyclePoints(n, volts, q))

    c100 = float(cycles[-1].total_capacity)
    threshold = 0.8 * sc.nominal_capacity_ah
    if c100 <= threshold:
        raise ValueError(f"infeasible scenario: {cell_id} already below threshold at cycle 100")
    last = life + _TAIL_EXTRA
    caps = tail_capacities(c100, life, threshold, last)
    if sc.tail_noise > 0:
        caps = caps + sc.tail_noise * rng.standard_normal(caps.size)
    shape_tail = base_capacity(_TAIL_VOLTAGES, sc.shape) / _Q0
    tv = _TAIL_VOLTAGES.copy()
    tv.setflags(write=False)
    for n, c in zip(range(101, last + 1), caps):
        cycles.append(CyclePoints(n, tv, c * shape_tail))

    cell = CellRecord(
        cell_id=cell_id,
        batch_id=batch,
        split=split,
        cycles=tuple(cycles),
        nominal_capacity_ah=sc.nominal_capacity_ah,
    )
    truth = {
        "split": split.value,
        "cycle_life": life,
        "dispersion": target,
        "log10_dispersion": log_disp,
        "severity": severity,
        "epsilon": eps,
    }
    return cell, truth


def generate(scenario: SynthScenario = SynthScenario()) -> tuple[list[CellRecord], dict]:
    """Cells for every split plus a ground-truth dictionary."""
    sc = scenario
    grid = VoltageGrid()
    volts = _sample_voltages(sc.points_per_cycle)
    sizes = (sc.n_train, sc.n_primary_test, sc.n_secondary_test)
    batches = ("synth-a", "synth-a", "synth-b")
    total = sum(sizes)
    streams = np.random.SeedSequence(sc.seed).spawn(total)
    cells, truth = [], {}
    k = 0
    for split, size, batch in zip(SPLITS, sizes, batches):
        for i in range(size):
            cid = f"{split.value[:3]}{i:03d}"
            cell, t = _generate_cell(cid, split, batch, sc, np.random.default_rng(streams[k]), volts, grid)
            cells.append(cell)
            truth[cid] = t
            k += 1
    ground_truth = {
        "scenario": asdict(sc),
        "link": {"a": sc.link_slope, "b": sc.link_intercept, "sigma": sc.link_sigma},
        "dispersion_statistic": "var",
        "dq_windows": {"hi": [100], "lo": [10]},
        "grid": grid.to_dict(),
        "cells": truth,
    }
    return cells, ground_truth


def noise_floor_rmse(ground_truth: dict, split: str) -> float:
    """RMSE in cycles of the true link (no estimation error) on one split."""
    a, b = ground_truth["link"]["a"], ground_truth["link"]["b"]
    rows = [t for t in ground_truth["cells"].values() if t["split"] == split]
    pred = np.array([10 ** (a * t["log10_dispersion"] + b) for t in rows])
    life = np.array([t["cycle_life"] for t in rows], dtype=float)
    return float(np.sqrt(np.mean((pred - life) ** 2)))


def write_synthetic(out_dir, scenario: SynthScenario = SynthScenario()) -> Path:
    """Write manifest, per-cell CSVs and ground_truth.json; returns the manifest path."""
    cells, truth = generate(scenario)
    manifest = write_dataset(cells, out_dir)
    Path(out_dir, "ground_truth.json").write_text(json.dumps(truth, indent=2))
    return manifest
