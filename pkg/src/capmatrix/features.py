"""Scalar and vector features computed from ΔQ vectors."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .dataset import CellRecord
from .matrix import (
    LINEAR,
    DeltaQVector,
    VoltageGrid,
    build_capacity_matrix,
    cycles_needed,
    delta_q,
    downsample,
)

STATISTICS = (
    "min",
    "max",
    "mean",
    "median",
    "range",
    "var",
    "std",
    "skewness",
    "kurtosis",
    "iqr",
    "idr",
    "mad",
    "sum",
    "value_at_v",
)
EXTRA_STATISTICS = ("percentile_range",)
TRANSFORMS = ("identity", "sqrt", "cbrt", "log10")

# statistics that may take either sign; sqrt/log10 need abs() first
SIGNED_STATISTICS = frozenset(
    {"min", "max", "mean", "median", "skewness", "kurtosis", "sum", "value_at_v"}
)
DEFAULT_ELEMENT_VOLTAGE = 2.959


class FeatureError(ValueError):
    pass


def percentile(x: np.ndarray, pct: float) -> float:
    # linear interpolation between closest ranks
    return float(np.percentile(x, pct, method="linear"))


def _central_moments(x):
    d = x - x.mean()
    return (d**2).mean(), (d**3).mean(), (d**4).mean()


def _skewness(x):
    n = x.size
    if n < 3:
        raise FeatureError("skewness needs at least 3 values")
    m2, m3, _ = _central_moments(x)
    g1 = m3 / m2**1.5
    return g1 * math.sqrt(n * (n - 1)) / (n - 2)


def _kurtosis(x):
    n = x.size
    if n < 4:
        raise FeatureError("kurtosis needs at least 4 values")
    m2, _, m4 = _central_moments(x)
    g2 = m4 / m2**2 - 3.0
    return ((n + 1) * g2 + 6.0) * (n - 1) / ((n - 2) * (n - 3))


def summary_statistic(v: DeltaQVector | np.ndarray, statistic: str, **params) -> float:
    """Population statistic of ΔQ values; only ``value_at_v`` looks at voltage."""
    x = v.values if isinstance(v, DeltaQVector) else np.asarray(v, dtype=float)
    if x.size == 0:
        raise FeatureError("empty vector")
    if statistic == "min":
        return float(x.min())
    if statistic == "max":
        return float(x.max())
    if statistic == "mean":
        return float(x.mean())
    if statistic == "median":
        return float(np.median(x))
    if statistic == "range":
        return float(x.max() - x.min())
    if statistic == "var":
        if x.size < 2:
            raise FeatureError("variance needs at least 2 values")
        return float(x.var(ddof=1))
    if statistic == "std":
        if x.size < 2:
            raise FeatureError("standard deviation needs at least 2 values")
        return float(x.std(ddof=1))
    if statistic == "skewness":
        return float(_skewness(x))
    if statistic == "kurtosis":
        return float(_kurtosis(x))
    if statistic == "iqr":
        return percentile_range_feature(x, 25, 75)
    if statistic == "idr":
        return percentile_range_feature(x, 10, 90)
    if statistic == "mad":
        return float(np.median(np.abs(x - np.median(x))))
    if statistic == "sum":
        return float(x.sum())
    if statistic == "value_at_v":
        if not isinstance(v, DeltaQVector):
            raise FeatureError("value_at_v needs a ΔQ vector with voltages")
        return single_element(v, params.get("voltage", DEFAULT_ELEMENT_VOLTAGE))[0]
    if statistic == "percentile_range":
        return percentile_range_feature(x, params["lower_pct"], params["upper_pct"])
    raise FeatureError(f"unknown statistic {statistic!r}")


def percentile_range_feature(v, lower_pct: float, upper_pct: float) -> float:
    """upper percentile minus lower; equal bounds give the percentile itself."""
    x = v.values if isinstance(v, DeltaQVector) else np.asarray(v, dtype=float)
    if not 0 <= lower_pct <= upper_pct <= 100:
        raise FeatureError(f"need 0 <= lower <= upper <= 100, got ({lower_pct}, {upper_pct})")
    if x.size == 0:
        raise FeatureError("empty vector")
    if lower_pct == upper_pct:
        return percentile(x, lower_pct)
    lo, hi = np.percentile(x, [lower_pct, upper_pct], method="linear")
    return float(hi - lo)


def nearest_index(voltages: np.ndarray, voltage: float, tie_tol: float = 1e-12) -> int:
    d = np.abs(np.asarray(voltages) - voltage)
    # lower index wins on (numerically) equal distance
    return int(np.flatnonzero(d <= d.min() + tie_tol)[0])


def single_element(v: DeltaQVector, voltage: float) -> tuple[float, float]:
    """ΔQ at the grid point nearest `voltage`; returns (value, snapped voltage)."""
    if not v.grid.v_min <= voltage <= v.grid.v_max:
        raise FeatureError(f"voltage {voltage} outside grid [{v.grid.v_min}, {v.grid.v_max}]")
    i = nearest_index(v.voltages, voltage)
    return float(v.values[i]), float(v.voltages[i])


def apply_transform(x: float, transformation: str, abs_before_transform: bool = False) -> float:
    if transformation == "identity":
        return x
    if transformation == "cbrt":
        return float(np.cbrt(x))
    if abs_before_transform:
        x = abs(x)
    if transformation == "sqrt":
        if x < 0:
            raise FeatureError(f"sqrt of negative value {x}")
        return math.sqrt(x)
    if transformation == "log10":
        if x <= 0:
            raise FeatureError(f"log10 of non-positive value {x}")
        return math.log10(x)
    raise FeatureError(f"unknown transformation {transformation!r}")


@dataclass(frozen=True)
class FeatureSpec:
    statistic: str
    transformation: str = "identity"
    abs_before_transform: bool | None = None
    lower_pct: float | None = None
    upper_pct: float | None = None
    voltage: float | None = None

    def __post_init__(self):
        if self.statistic not in STATISTICS + EXTRA_STATISTICS:
            raise FeatureError(f"unknown statistic {self.statistic!r}")
        if self.transformation not in TRANSFORMS:
            raise FeatureError(f"unknown transformation {self.transformation!r}")
        signed = self.can_be_negative
        if self.abs_before_transform is None:
            object.__setattr__(
                self,
                "abs_before_transform",
                signed and self.transformation in ("sqrt", "log10"),
            )
        elif signed and self.transformation in ("sqrt", "log10") and not self.abs_before_transform:
            raise FeatureError(
                f"{self.statistic} can be negative; {self.transformation} needs abs_before_transform"
            )
        if self.statistic == "percentile_range":
            if self.lower_pct is None or self.upper_pct is None:
                raise FeatureError("percentile_range needs lower_pct and upper_pct")
            if not 0 <= self.lower_pct <= self.upper_pct <= 100:
                raise FeatureError("need 0 <= lower_pct <= upper_pct <= 100")
        if self.statistic == "value_at_v" and self.voltage is None:
            object.__setattr__(self, "voltage", DEFAULT_ELEMENT_VOLTAGE)

    @property
    def can_be_negative(self) -> bool:
        if self.statistic == "percentile_range":
            return self.lower_pct == self.upper_pct
        return self.statistic in SIGNED_STATISTICS

    @property
    def params(self) -> dict:
        if self.statistic == "percentile_range":
            return {"lower_pct": self.lower_pct, "upper_pct": self.upper_pct}
        if self.statistic == "value_at_v":
            return {"voltage": self.voltage}
        return {}

    @property
    def base_name(self) -> str:
        if self.statistic == "percentile_range":
            return f"pct_{self.lower_pct:g}_{self.upper_pct:g}"
        if self.statistic == "value_at_v":
            return f"dq@{self.voltage:.4f}V"
        return self.statistic

    @property
    def name(self) -> str:
        inner = f"abs({self.base_name})" if self.abs_before_transform else self.base_name
        return inner if self.transformation == "identity" else f"{self.transformation}({inner})"

    @property
    def label(self) -> str:
        """Short row label; an asterisk marks statistics that take both signs."""
        return self.base_name + ("*" if self.can_be_negative else "")

    def evaluate(self, v: DeltaQVector) -> float:
        x = summary_statistic(v, self.statistic, **self.params)
        return apply_transform(x, self.transformation, self.abs_before_transform)


def statistic_grid_specs(statistics=STATISTICS, transforms=TRANSFORMS) -> list[FeatureSpec]:
    return [FeatureSpec(s, t) for s in statistics for t in transforms]


@dataclass(frozen=True)
class DeltaQConfig:
    hi: tuple[int, ...] = (100,)
    lo: tuple[int, ...] = (10,)
    grid: VoltageGrid = field(default_factory=VoltageGrid)
    n_downsample: int | None = None
    method: str = LINEAR

    def __post_init__(self):
        object.__setattr__(self, "hi", tuple(int(c) for c in np.atleast_1d(self.hi)))
        object.__setattr__(self, "lo", tuple(int(c) for c in np.atleast_1d(self.lo)))

    @property
    def label(self) -> str:
        def w(c):
            return str(c[0]) if len(c) == 1 else f"{min(c)}:{max(c)}"

        return f"dQ{w(self.hi)}-{w(self.lo)}"

    def with_downsample(self, n: int | None) -> "DeltaQConfig":
        return DeltaQConfig(self.hi, self.lo, self.grid, n, self.method)

    def full(self) -> "DeltaQConfig":
        return self.with_downsample(None)


class DeltaQCache:
    """Memoizes full-resolution ΔQ vectors per (cell, windows, grid, method)."""

    def __init__(self):
        self._store: dict = {}

    def get(self, cell: CellRecord, cfg: DeltaQConfig) -> DeltaQVector:
        key = (cell.cell_id, cfg.full())
        v = self._store.get(key)
        if v is None:
            v = compute_delta_q(cell, cfg.full())
            self._store[key] = v
        if cfg.n_downsample is not None:
            v = downsample(v, cfg.n_downsample)
        return v

    def __len__(self):
        return len(self._store)


def compute_delta_q(cell: CellRecord, cfg: DeltaQConfig) -> DeltaQVector:
    lo, hi = cycles_needed([cfg.hi, cfg.lo])
    m = build_capacity_matrix(cell, cfg.grid, lo, hi, cfg.method)
    v = delta_q(m, cfg.hi, cfg.lo)
    if cfg.n_downsample is not None:
        v = downsample(v, cfg.n_downsample)
    return v


def element_specs(cfg: DeltaQConfig) -> list[FeatureSpec]:
    """One identity feature per (downsampled) ΔQ element."""
    n = cfg.n_downsample or cfg.grid.n_points
    idx = np.rint(np.linspace(0, cfg.grid.n_points - 1, n)).astype(int)
    volts = cfg.grid.values[idx]
    return [FeatureSpec("value_at_v", "identity", voltage=float(u)) for u in volts]


@dataclass(eq=False)
class FeatureTable:
    cell_ids: list[str]
    feature_names: list[str]
    values: np.ndarray
    cycle_life: np.ndarray
    splits: list[str]
    is_outlier: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(self.values)):
            bad = np.argwhere(~np.isfinite(self.values))[0]
            raise FeatureError(
                f"non-finite feature {self.feature_names[bad[1]]} for cell {self.cell_ids[bad[0]]}"
            )

    @property
    def log10_cycle_life(self) -> np.ndarray:
        return np.log10(self.cycle_life.astype(float))

    def rows(self, split: str, include_outliers: bool = False) -> np.ndarray:
        mask = np.array([s == split for s in self.splits])
        if not include_outliers:
            mask &= ~self.is_outlier
        return np.flatnonzero(mask)

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["cell_id", *self.feature_names, "cycle_life", "log10_cycle_life", "split"])
            for i, cid in enumerate(self.cell_ids):
                life = int(self.cycle_life[i])
                w.writerow([cid, *map(repr, self.values[i].tolist()), life, repr(math.log10(life)), self.splits[i]])
        return path


@dataclass
class FeaturePipeline:
    """ΔQ configuration plus the feature specs computed from it."""

    dq: DeltaQConfig
    specs: list[FeatureSpec]
    cache: DeltaQCache = field(default_factory=DeltaQCache, repr=False)

    @property
    def feature_names(self) -> list[str]:
        return [s.name for s in self.specs]

    def transform(self, cells: Sequence[CellRecord]) -> np.ndarray:
        return extract_table(cells, self.specs, self.dq, cache=self.cache, labels=False).values


def extract_table(
    cells: Sequence[CellRecord],
    specs: Sequence[FeatureSpec],
    dq_config: DeltaQConfig,
    cache: DeltaQCache | None = None,
    labels: bool = True,
) -> FeatureTable:
    """Cells x features table; rows ordered by cell_id.

    Any per-cell failure aborts with the offending cell named.
    """
    if not specs:
        raise FeatureError("no feature specs")
    cache = cache if cache is not None else DeltaQCache()
    cells = sorted(cells, key=lambda c: c.cell_id) if labels else list(cells)
    values = np.empty((len(cells), len(specs)))
    lives = np.zeros(len(cells), dtype=int)
    for i, cell in enumerate(cells):
        try:
            v = cache.get(cell, dq_config)
            values[i] = [s.evaluate(v) for s in specs]
            if labels:
                lives[i] = cell.label().cycle_life
        except ValueError as exc:
            raise FeatureError(f"cell {cell.cell_id}: {exc}") from exc
    return FeatureTable(
        cell_ids=[c.cell_id for c in cells],
        feature_names=[s.name for s in specs],
        values=values,
        cycle_life=lives,
        splits=[c.split.value for c in cells],
        is_outlier=np.array([c.is_outlier for c in cells], dtype=bool),
    )
