"""Capacity matrices on a fixed voltage grid, ΔQ vectors and downsampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .dataset import CellRecord, CyclePoints

RAW = "raw"
BASELINE_SUBTRACTED = "baseline_subtracted"
BASELINE_DIVIDED = "baseline_divided"
KINDS = (RAW, BASELINE_SUBTRACTED, BASELINE_DIVIDED)

LINEAR = "linear"
SMOOTHING_SPLINE = "smoothing_spline"

MIN_DISTINCT_VOLTAGES = 4
MAX_CYCLE_GAP = 2
DIVISION_FLOOR_AH = 1e-4


class MatrixError(ValueError):
    pass


@dataclass(frozen=True)
class VoltageGrid:
    """Evenly spaced voltages, both endpoints included."""

    v_min: float = 2.0
    v_max: float = 3.6
    n_points: int = 1000

    def __post_init__(self):
        if not self.v_min < self.v_max:
            raise ValueError(f"v_min must be below v_max ({self.v_min} >= {self.v_max})")
        if int(self.n_points) < 2:
            raise ValueError(f"need at least 2 grid points, got {self.n_points}")
        object.__setattr__(self, "n_points", int(self.n_points))

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.v_min, self.v_max, self.n_points)

    @property
    def spacing(self) -> float:
        return (self.v_max - self.v_min) / (self.n_points - 1)

    def to_dict(self) -> dict:
        return {"v_min": self.v_min, "v_max": self.v_max, "n_points": self.n_points}


@dataclass(frozen=True, eq=False)
class CapacityMatrix:
    grid: VoltageGrid
    cycles: tuple[int, ...]
    q: np.ndarray
    kind: str = RAW
    baseline_cycle: int | None = None
    substitutions: dict = field(default_factory=dict)

    def __post_init__(self):
        q = np.array(self.q, dtype=float)
        q.setflags(write=False)
        cycles = tuple(int(c) for c in self.cycles)
        if q.shape != (self.grid.n_points, len(cycles)):
            raise MatrixError(f"matrix shape {q.shape} does not match grid x cycles")
        if self.kind not in KINDS:
            raise MatrixError(f"unknown matrix kind {self.kind!r}")
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "cycles", cycles)

    @property
    def shape(self):
        return self.q.shape

    def column_index(self, n: int) -> int:
        try:
            return self.cycles.index(n)
        except ValueError:
            raise MatrixError(f"cycle {n} not in matrix (cycles {self.cycles[0]}..{self.cycles[-1]})") from None

    def column(self, n: int) -> np.ndarray:
        return self.q[:, self.column_index(n)]

    def is_monotone(self, tol: float = 1e-9) -> bool:
        """Raw columns must not increase with voltage beyond `tol`."""
        return bool(np.all(np.diff(self.q, axis=0) <= tol))


@dataclass(frozen=True, eq=False)
class DeltaQVector:
    grid: VoltageGrid
    values: np.ndarray
    hi_cycles: tuple[int, ...]
    lo_cycles: tuple[int, ...]
    voltages: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        values.setflags(write=False)
        if values.shape != (self.grid.n_points,):
            raise MatrixError(f"ΔQ length {values.shape} does not match grid ({self.grid.n_points})")
        volts = self.grid.values if self.voltages is None else np.array(self.voltages, dtype=float)
        volts.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "voltages", volts)
        object.__setattr__(self, "hi_cycles", tuple(int(c) for c in self.hi_cycles))
        object.__setattr__(self, "lo_cycles", tuple(int(c) for c in self.lo_cycles))

    def __len__(self):
        return self.values.size


def _monotone_basis(points: CyclePoints) -> tuple[np.ndarray, np.ndarray]:
    v = points.voltage_v
    q = points.discharge_capacity_ah
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(q))):
        raise MatrixError(f"cycle {points.cycle_number}: non-finite voltage or capacity")
    order = np.argsort(v, kind="stable")
    v, q = v[order], q[order]
    uv, start = np.unique(v, return_index=True)
    if uv.size < MIN_DISTINCT_VOLTAGES:
        raise MatrixError(
            f"cycle {points.cycle_number}: {uv.size} distinct voltages, need {MIN_DISTINCT_VOLTAGES}"
        )
    if uv.size == v.size:
        return uv, q
    # median-aggregate repeated voltages
    uq = np.array([np.median(g) for g in np.split(q, start[1:])])
    return uv, uq


def resample_cycle(points: CyclePoints, grid: VoltageGrid, method: str = LINEAR) -> np.ndarray:
    """Capacity as a function of voltage, evaluated on `grid`.

    Grid voltages outside the observed range take the capacity at the nearest
    observed voltage.
    """
    v, q = _monotone_basis(points)
    x = np.clip(grid.values, v[0], v[-1])
    if method == LINEAR:
        return np.interp(x, v, q)
    if method == SMOOTHING_SPLINE:
        from scipy.interpolate import make_smoothing_spline

        # penalty chosen by generalized cross-validation when lam is None
        spline = make_smoothing_spline(v, q)
        return spline(x)
    raise ValueError(f"unknown resampling method {method!r}")


def _resolve_cycle(cell: CellRecord, n: int) -> int:
    if cell.has_cycle(n):
        return n
    for d in range(1, MAX_CYCLE_GAP + 1):
        for cand in (n - d, n + d):
            if cand >= 1 and cell.has_cycle(cand):
                return cand
    raise MatrixError(f"{cell.cell_id}: cycle {n} missing and no substitute within ±{MAX_CYCLE_GAP}")


def build_capacity_matrix(
    cell: CellRecord,
    grid: VoltageGrid | None = None,
    cycle_lo: int = 2,
    cycle_hi: int = 100,
    method: str = LINEAR,
) -> CapacityMatrix:
    grid = grid or VoltageGrid()
    if cycle_lo < 1 or cycle_hi < cycle_lo:
        raise ValueError(f"invalid cycle window [{cycle_lo}, {cycle_hi}]")
    cycles = tuple(range(cycle_lo, cycle_hi + 1))
    cols = []
    subs = {}
    for n in cycles:
        src = _resolve_cycle(cell, n)
        if src != n:
            subs[n] = src
        try:
            cols.append(resample_cycle(cell.cycle(src), grid, method))
        except MatrixError as exc:
            raise MatrixError(f"{cell.cell_id}: {exc}") from None
    return CapacityMatrix(grid, cycles, np.column_stack(cols), RAW, None, subs)


def normalize(m: CapacityMatrix, kind: str, baseline_cycle: int = 2) -> CapacityMatrix:
    if m.kind != RAW:
        raise MatrixError(f"normalize expects a raw matrix, got {m.kind}")
    base = m.column(baseline_cycle)[:, None]
    if kind == BASELINE_SUBTRACTED:
        q = m.q - base
    elif kind == BASELINE_DIVIDED:
        if np.any(base <= DIVISION_FLOOR_AH):
            raise MatrixError(
                f"baseline cycle {baseline_cycle} has capacities <= {DIVISION_FLOOR_AH} Ah; "
                "ratio undefined"
            )
        q = m.q / base
    else:
        raise MatrixError(f"cannot normalize to {kind!r}")
    return CapacityMatrix(m.grid, m.cycles, q, kind, baseline_cycle, dict(m.substitutions))


def _window(w) -> tuple[int, ...]:
    if isinstance(w, (int, np.integer)):
        return (int(w),)
    w = tuple(int(c) for c in w)
    if not w:
        raise MatrixError("empty cycle window")
    return w


def delta_q(m: CapacityMatrix, hi=100, lo=10) -> DeltaQVector:
    """Mean of the `hi` window columns minus mean of the `lo` window columns."""
    if m.kind != RAW:
        raise MatrixError(f"delta_q expects a raw matrix, got {m.kind}")
    hi, lo = _window(hi), _window(lo)
    qh = m.q[:, [m.column_index(c) for c in hi]].mean(axis=1)
    ql = m.q[:, [m.column_index(c) for c in lo]].mean(axis=1)
    return DeltaQVector(m.grid, qh - ql, hi, lo)


def downsample_indices(n_points: int, n_target: int) -> np.ndarray:
    if not 2 <= n_target <= n_points:
        raise ValueError(f"n_target must be in [2, {n_points}], got {n_target}")
    return np.rint(np.linspace(0, n_points - 1, n_target)).astype(int)


def downsample(v: DeltaQVector, n_target: int) -> DeltaQVector:
    """Keep `n_target` evenly spaced entries; the endpoints always survive.

    The returned grid is the nominal uniform grid over the same window; the
    exact kept voltages are carried in ``voltages``.
    """
    idx = downsample_indices(v.grid.n_points, n_target)
    if n_target == v.grid.n_points:
        return v
    grid = VoltageGrid(v.grid.v_min, v.grid.v_max, n_target)
    return DeltaQVector(grid, v.values[idx], v.hi_cycles, v.lo_cycles, v.voltages[idx])


def energy_proxy(m: CapacityMatrix) -> np.ndarray:
    """Column sums times grid spacing (Ah·V, i.e. Wh), one per cycle.

    For a baseline-subtracted matrix this tracks the change in constant-current
    discharge energy relative to the baseline cycle.
    """
    return m.q.sum(axis=0) * m.grid.spacing


def write_matrix(m: CapacityMatrix, path) -> Path:
    """CSV with a voltage column then one column per cycle, plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = "voltage_v," + ",".join(f"c{n}" for n in m.cycles)
    data = np.column_stack([m.grid.values, m.q])
    np.savetxt(path, data, delimiter=",", header=header, comments="", fmt="%.17g")
    sidecar = path.with_suffix(".json")
    sidecar.write_text(json.dumps({
        "kind": m.kind,
        "baseline_cycle": m.baseline_cycle,
        "grid": m.grid.to_dict(),
        "cycles": list(m.cycles),
        "substitutions": {str(k): v for k, v in m.substitutions.items()},
    }, indent=2))
    return path


def read_matrix(path) -> CapacityMatrix:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    grid = VoltageGrid(**meta["grid"])
    subs = {int(k): v for k, v in meta.get("substitutions", {}).items()}
    return CapacityMatrix(grid, meta["cycles"], data[:, 1:], meta["kind"], meta["baseline_cycle"], subs)


def cycles_needed(windows: Iterable[Sequence[int]]) -> tuple[int, int]:
    flat = [c for w in windows for c in _window(w)]
    return min(flat), max(flat)
