"""Cell records, CSV ingestion and cycle-life labels."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

CELL_COLUMNS = ("cycle_number", "voltage_v", "discharge_capacity_ah")
MANIFEST_COLUMNS = (
    "cell_id",
    "batch_id",
    "split",
    "file",
    "nominal_capacity_ah",
    "cycle_life",
    "is_outlier",
)
DEFAULT_NOMINAL_AH = 1.1
VOLTAGE_WINDOW = (1.5, 4.0)
RUN_LENGTH = 5


class DatasetError(ValueError):
    """Malformed input data or manifest."""


class CensoredCellError(ValueError):
    """Capacity never stays below the end-of-life threshold."""


class Split(str, enum.Enum):
    TRAIN = "train"
    PRIMARY_TEST = "primary_test"
    SECONDARY_TEST = "secondary_test"


SPLITS = (Split.TRAIN, Split.PRIMARY_TEST, Split.SECONDARY_TEST)


def _frozen(a) -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.flags.writeable:
        a = a.copy()
        a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CyclePoints:
    cycle_number: int
    voltage_v: np.ndarray
    discharge_capacity_ah: np.ndarray

    def __post_init__(self):
        v = _frozen(self.voltage_v)
        q = _frozen(self.discharge_capacity_ah)
        if v.ndim != 1 or v.shape != q.shape or v.size == 0:
            raise DatasetError(
                f"cycle {self.cycle_number}: voltage and capacity must be equal, nonzero length"
            )
        if int(self.cycle_number) < 1:
            raise DatasetError(f"cycle number must be positive, got {self.cycle_number}")
        object.__setattr__(self, "cycle_number", int(self.cycle_number))
        object.__setattr__(self, "voltage_v", v)
        object.__setattr__(self, "discharge_capacity_ah", q)

    def validate_window(self, window: tuple[float, float] = VOLTAGE_WINDOW) -> None:
        lo, hi = window
        v = self.voltage_v
        if not np.all(np.isfinite(v)) or v.min() < lo or v.max() > hi:
            raise DatasetError(
                f"cycle {self.cycle_number}: voltages outside plausible window [{lo}, {hi}] V"
            )

    @property
    def total_capacity(self) -> float:
        # discharge capacity is cumulative within a cycle
        return float(np.max(self.discharge_capacity_ah))


@dataclass(frozen=True)
class LifetimeLabel:
    cycle_life: int

    def __post_init__(self):
        if int(self.cycle_life) < 1:
            raise ValueError(f"cycle life must be positive, got {self.cycle_life}")
        object.__setattr__(self, "cycle_life", int(self.cycle_life))

    @property
    def log10_cycle_life(self) -> float:
        return math.log10(self.cycle_life)


@dataclass(frozen=True, eq=False)
class CellRecord:
    cell_id: str
    batch_id: str
    split: Split
    cycles: tuple[CyclePoints, ...]
    nominal_capacity_ah: float = DEFAULT_NOMINAL_AH
    cycle_life: int | None = None
    is_outlier: bool = False
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "split", Split(self.split))
        cycles = tuple(self.cycles)
        numbers = [c.cycle_number for c in cycles]
        if any(b <= a for a, b in zip(numbers, numbers[1:])):
            raise DatasetError(f"{self.cell_id}: cycle numbers must be strictly increasing")
        object.__setattr__(self, "cycles", cycles)
        object.__setattr__(self, "_index", {n: c for n, c in zip(numbers, cycles)})
        if self.cycle_life is not None:
            object.__setattr__(self, "cycle_life", int(self.cycle_life))

    @property
    def cycle_numbers(self) -> list[int]:
        return list(self._index)

    def cycle(self, n: int) -> CyclePoints:
        try:
            return self._index[n]
        except KeyError:
            raise KeyError(f"{self.cell_id}: cycle {n} not present") from None

    def has_cycle(self, n: int) -> bool:
        return n in self._index

    def label(self) -> LifetimeLabel:
        if self.cycle_life is not None:
            return LifetimeLabel(self.cycle_life)
        return compute_cycle_life(self)


def compute_cycle_life(cell: CellRecord, threshold_fraction: float = 0.8) -> LifetimeLabel:
    """End-of-life cycle: start of the first run of `RUN_LENGTH` consecutive
    cycles with total capacity below ``threshold_fraction * nominal``.

    If no run is that long but the trace ends below threshold, the start of the
    terminal run is returned. Isolated dips followed by recovery are ignored.
    """
    if not cell.cycles:
        raise CensoredCellError(f"{cell.cell_id}: no cycles")
    threshold = threshold_fraction * cell.nominal_capacity_ah
    # 0.8 * 1.1 rounds up to 0.8800000000000001; a cell at exactly 0.88 Ah is not below
    cut = threshold * (1.0 - 1e-12)
    numbers = [c.cycle_number for c in cell.cycles]
    below = [c.total_capacity < cut for c in cell.cycles]

    run_start = None
    run_len = 0
    for n, b in zip(numbers, below):
        if b:
            if run_len == 0:
                run_start = n
            run_len += 1
            if run_len >= RUN_LENGTH:
                return LifetimeLabel(run_start)
        else:
            run_len = 0
    if run_len > 0:
        return LifetimeLabel(run_start)
    raise CensoredCellError(
        f"{cell.cell_id}: capacity never falls below {threshold:.4g} Ah (censored cell)"
    )


def _parse_bool(s: str, where: str) -> bool:
    t = (s or "").strip().lower()
    if t in ("", "0", "false", "no", "n", "f"):
        return False
    if t in ("1", "true", "yes", "y", "t"):
        return True
    raise DatasetError(f"{where}: cannot parse is_outlier value {s!r}")


def read_cell_csv(path: Path, voltage_window=VOLTAGE_WINDOW) -> list[CyclePoints]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"cell file not found: {path}")
    try:
        df = pd.read_csv(path, float_precision="round_trip")
    except Exception as exc:  # pandas raises a zoo of parser errors
        raise DatasetError(f"{path}: unreadable CSV ({exc})") from exc
    missing = [c for c in CELL_COLUMNS if c not in df.columns]
    if missing:
        raise DatasetError(f"{path}: missing columns {missing}")
    if df.empty:
        raise DatasetError(f"{path}: no data rows")
    try:
        cyc = df["cycle_number"].to_numpy(dtype=np.int64)
        v = df["voltage_v"].to_numpy(dtype=float)
        q = df["discharge_capacity_ah"].to_numpy(dtype=float)
    except (ValueError, TypeError) as exc:
        raise DatasetError(f"{path}: non-numeric values ({exc})") from exc
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(q))):
        raise DatasetError(f"{path}: non-finite voltage or capacity")

    order = np.argsort(cyc, kind="stable")
    cyc, v, q = cyc[order], v[order], q[order]
    numbers, starts = np.unique(cyc, return_index=True)
    bounds = list(starts[1:]) + [len(cyc)]
    out = []
    for n, s, e in zip(numbers, starts, bounds):
        cp = CyclePoints(int(n), v[s:e], q[s:e])
        try:
            cp.validate_window(voltage_window)
        except DatasetError as exc:
            raise DatasetError(f"{path}: {exc}") from None
        out.append(cp)
    return out


def write_cell_csv(cycles: Iterable[CyclePoints], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(CELL_COLUMNS) + "\n")
        for c in cycles:
            n = c.cycle_number
            fh.writelines(
                f"{n},{vi!r},{qi!r}\n"
                for vi, qi in zip(c.voltage_v.tolist(), c.discharge_capacity_ah.tolist())
            )


def _read_manifest(manifest_path: Path) -> list[dict]:
    with open(manifest_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in MANIFEST_COLUMNS if c not in header]
        if missing:
            raise DatasetError(f"{manifest_path}: manifest missing columns {missing}")
        return list(reader)


def load_dataset(
    manifest_path,
    data_dir=None,
    voltage_window=VOLTAGE_WINDOW,
) -> list[CellRecord]:
    """Load every cell listed in a manifest CSV.

    ``data_dir`` defaults to the manifest's directory; ``file`` entries are
    resolved relative to it. Outlier rows are loaded and flagged, never dropped.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    data_dir = Path(data_dir) if data_dir is not None else manifest_path.parent
    rows = _read_manifest(manifest_path)

    cells = []
    seen = set()
    for lineno, row in enumerate(rows, start=2):
        where = f"{manifest_path}:{lineno}"
        cell_id = (row["cell_id"] or "").strip()
        if not cell_id:
            raise DatasetError(f"{where}: empty cell_id")
        if cell_id in seen:
            raise DatasetError(f"{where}: duplicate cell_id {cell_id!r}")
        seen.add(cell_id)
        try:
            split = Split((row["split"] or "").strip())
        except ValueError:
            raise DatasetError(f"{where}: unknown split label {row['split']!r}") from None
        try:
            nominal = float(row["nominal_capacity_ah"]) if row["nominal_capacity_ah"].strip() else DEFAULT_NOMINAL_AH
            life_s = (row["cycle_life"] or "").strip()
            cycle_life = int(float(life_s)) if life_s else None
        except (ValueError, AttributeError) as exc:
            raise DatasetError(f"{where}: malformed row ({exc})") from None
        if nominal <= 0 or (cycle_life is not None and cycle_life < 1):
            raise DatasetError(f"{where}: nominal capacity and cycle life must be positive")
        file = (row["file"] or "").strip()
        if not file:
            raise DatasetError(f"{where}: empty file column")
        cycles = read_cell_csv(data_dir / file, voltage_window)
        cells.append(
            CellRecord(
                cell_id=cell_id,
                batch_id=(row["batch_id"] or "").strip(),
                split=split,
                cycles=tuple(cycles),
                nominal_capacity_ah=nominal,
                cycle_life=cycle_life,
                is_outlier=_parse_bool(row["is_outlier"], where),
            )
        )
    return cells


def write_dataset(cells: Sequence[CellRecord], out_dir, manifest_name="manifest.csv") -> Path:
    """Write cells as per-cell CSVs plus a manifest; inverse of `load_dataset`."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / manifest_name
    with open(manifest, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(MANIFEST_COLUMNS)
        for cell in cells:
            fname = f"cells/{cell.cell_id}.csv"
            write_cell_csv(cell.cycles, out_dir / fname)
            w.writerow([
                cell.cell_id,
                cell.batch_id,
                cell.split.value,
                fname,
                repr(float(cell.nominal_capacity_ah)),
                "" if cell.cycle_life is None else cell.cycle_life,
                "true" if cell.is_outlier else "false",
            ])
    return manifest


def split_counts(cells: Iterable[CellRecord]) -> dict[str, int]:
    counts = {s.value: 0 for s in SPLITS}
    for c in cells:
        counts[c.split.value] += 1
    return counts
