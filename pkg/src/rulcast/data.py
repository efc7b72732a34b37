"""Per-cycle capacity data: loading, normalization, windowing, splits.

The canonical on-disk format is a CSV with header ``cycle,capacity_ah``
(UTF-8, LF line endings), one record per cycle, grouped into datasets by a
manifest JSON ``{"name", "nominal_ah", "cells": [{"id", "path"}]}`` with
paths relative to the manifest file. End of life is fixed at 70% of
nominal capacity (1.40 Ah for the 2.0 Ah NASA cells, 0.77 Ah for the
1.1 Ah CALCE cells).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DataError, FormatError

CSV_HEADER = "cycle,capacity_ah"
EOL_FRACTION = 0.70


@dataclass(frozen=True)
class CapacitySeries:
    """One cell's per-cycle capacity record, cycles indexed from 1."""

    cell_id: str
    capacities: np.ndarray
    nominal_ah: float
    eol_ah: float

    def __post_init__(self):
        caps = np.asarray(self.capacities, dtype=np.float64)
        object.__setattr__(self, "capacities", caps)
        if caps.ndim != 1 or caps.size == 0:
            raise DataError(f"cell {self.cell_id}: capacity series must be a nonempty vector")
        if not np.all(caps > 0):
            raise DataError(f"cell {self.cell_id}: capacities must be positive")
        if not np.all(np.isfinite(caps)):
            raise DataError(f"cell {self.cell_id}: capacities must be finite")
        if abs(self.eol_ah - EOL_FRACTION * self.nominal_ah) > 1e-9:
            raise DataError(
                f"cell {self.cell_id}: EOL {self.eol_ah} is not 70% of nominal {self.nominal_ah}")

    @classmethod
    def create(cls, cell_id: str, capacities, nominal_ah: float) -> "CapacitySeries":
        return cls(cell_id, np.asarray(capacities, dtype=np.float64),
                   float(nominal_ah), EOL_FRACTION * float(nominal_ah))

    def __len__(self) -> int:
        return int(self.capacities.size)


def normalize(series: CapacitySeries) -> CapacitySeries:
    """Divide by nominal capacity; the EOL threshold becomes exactly 0.70."""
    if series.nominal_ah <= 0:
        raise DataError(f"cell {series.cell_id}: nominal capacity must be positive")
    return CapacitySeries.create(series.cell_id, series.capacities / series.nominal_ah, 1.0)


def denormalize(series: CapacitySeries, nominal_ah: float) -> CapacitySeries:
    return CapacitySeries.create(series.cell_id, series.capacities * nominal_ah, nominal_ah)


# ---------------------------------------------------------------------------
# canonical CSV


def load_capacity_csv(path: str | Path, cell_id: str | None = None,
                      nominal_ah: float = 2.0) -> CapacitySeries:
    """Read a canonical capacity CSV.

    Rows are ordered by cycle index and renumbered 1..n when the file's
    indices have gaps. Duplicate cycle indices and non-positive capacities
    are data errors.
    """
    path = Path(path)
    cell_id = cell_id or path.stem
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise DataError(f"{path}: file is empty")
            if [h.strip() for h in header] != CSV_HEADER.split(","):
                raise FormatError(f"{path}: expected header {CSV_HEADER!r}, got {header!r}")
            rows: list[tuple[int, float]] = []
            seen: set[int] = set()
            for line_no, row in enumerate(reader, start=2):
                if not row:
                    continue
                if len(row) != 2:
                    raise FormatError(f"{path}:{line_no}: expected 2 columns, got {len(row)}")
                try:
                    cycle = int(row[0])
                    cap = float(row[1])
                except ValueError as exc:
                    raise FormatError(f"{path}:{line_no}: {exc}") from exc
                if cycle < 1:
                    raise DataError(f"{path}:{line_no}: cycle index must be positive, got {cycle}")
                if cycle in seen:
                    raise DataError(f"{path}:{line_no}: duplicate cycle index {cycle}")
                if cap <= 0:
                    raise DataError(f"{path}:{line_no}: non-positive capacity {cap}")
                seen.add(cycle)
                rows.append((cycle, cap))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise DataError(f"{path}: no capacity records")
    rows.sort(key=lambda r: r[0])
    return CapacitySeries.create(cell_id, [cap for _, cap in rows], nominal_ah)


def write_capacity_csv(series: CapacitySeries, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CSV_HEADER + "\n")
        for i, cap in enumerate(series.capacities, start=1):
            fh.write(f"{i},{float(cap)!r}\n")


# ---------------------------------------------------------------------------
# windowing and splits


@dataclass
class WindowedDataset:
    """Sliding-window (input, target) pairs over a normalized series.

    ``provenance`` records (cell_id, end_cycle) per pair, where end_cycle
    is the 1-based cycle of the window's last element; the target is the
    capacity at end_cycle + 1.
    """

    inputs: np.ndarray  # (n, T_w)
    targets: np.ndarray  # (n,)
    provenance: list[tuple[str, int]] = field(default_factory=list)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets) or len(self.inputs) != len(self.provenance):
            raise DataError("windowed dataset arrays disagree in length")

    def __len__(self) -> int:
        return int(self.inputs.shape[0])

    @property
    def window(self) -> int:
        return int(self.inputs.shape[1])


def make_windows(series: CapacitySeries, t_w: int) -> WindowedDataset:
    """Stride-1 windows of length t_w with next-cycle targets."""
    values = series.capacities
    n = values.size
    if n <= t_w:
        raise DataError(
            f"cell {series.cell_id}: series of length {n} is too short for "
            f"window {t_w}; needs at least {t_w + 1} cycles")
    count = n - t_w
    inputs = np.lib.stride_tricks.sliding_window_view(values, t_w)[:count].copy()
    targets = values[t_w:].copy()
    provenance = [(series.cell_id, i + t_w) for i in range(count)]
    return WindowedDataset(inputs, targets, provenance)


def merge_windows(datasets: Sequence[WindowedDataset]) -> WindowedDataset:
    if not datasets:
        raise DataError("cannot merge an empty list of window datasets")
    widths = {d.window for d in datasets}
    if len(widths) > 1:
        raise DataError(f"cannot merge window datasets of different widths: {sorted(widths)}")
    return WindowedDataset(
        np.concatenate([d.inputs for d in datasets]),
        np.concatenate([d.targets for d in datasets]),
        [p for d in datasets for p in d.provenance],
    )


@dataclass(frozen=True)
class SplitSpec:
    """Leave-one-out split: one test cell, the rest for training."""

    test_cell: str
    train_cells: tuple[str, ...]


def leave_one_out(cells: Sequence[CapacitySeries], test_id: str) -> SplitSpec:
    ids = [c.cell_id for c in cells]
    if len(ids) != len(set(ids)):
        raise DataError(f"duplicate cell ids in dataset: {ids}")
    if test_id not in ids:
        raise DataError(f"unknown test cell {test_id!r}; available: {sorted(ids)}")
    train = tuple(i for i in ids if i != test_id)
    if not train:
        raise DataError("leave-one-out needs at least two cells (no training data left)")
    return SplitSpec(test_cell=test_id, train_cells=train)


# ---------------------------------------------------------------------------
# synthetic degradation


def synthesize_degradation(
    seed: int,
    cycles: int,
    regen_rate: float = 0.02,
    noise_sd: float = 0.003,
    nominal_ah: float = 2.0,
    cell_id: str | None = None,
    floor_frac: float = 0.6,
) -> CapacitySeries:
    """A seed-deterministic synthetic capacity curve.

    Exponential fade from nominal toward ``floor_frac`` of nominal, with
    per-cycle Bernoulli(regen_rate) regeneration jumps of 1-3% nominal
    that relax over ~8 cycles, plus Gaussian measurement noise. With
    regen_rate = 0 and noise_sd = 0 the curve is strictly decreasing.
    """
    if cycles < 10:
        raise DataError(f"synthetic series needs at least 10 cycles, got {cycles}")
    rng = np.random.default_rng(seed)
    t = np.arange(cycles, dtype=np.float64)
    # decay constant chosen so the endpoint sits well within 5% of the floor
    fade = floor_frac + (1.0 - floor_frac) * np.exp(-3.5 * t / cycles)

    bump = np.zeros(cycles)
    events = rng.random(cycles) < regen_rate
    magnitudes = rng.uniform(0.01, 0.03, size=cycles)
    tau = 8.0
    for s in np.nonzero(events)[0]:
        span = t[s:] - t[s]
        bump[s:] += magnitudes[s] * np.exp(-span / tau)

    noise = rng.normal(0.0, noise_sd, size=cycles) if noise_sd > 0 else 0.0
    values = np.maximum((fade + bump + noise) * nominal_ah, 1e-3)
    cid = cell_id or f"SYN{seed:04d}"
    return CapacitySeries.create(cid, values, nominal_ah)


# ---------------------------------------------------------------------------
# dataset manifests


@dataclass
class DatasetManifest:
    name: str
    nominal_ah: float
    cells: list[CapacitySeries]

    def cell(self, cell_id: str) -> CapacitySeries:
        for c in self.cells:
            if c.cell_id == cell_id:
                return c
        raise DataError(
            f"unknown cell {cell_id!r} in dataset {self.name!r}; "
            f"available: {sorted(c.cell_id for c in self.cells)}")

    def cell_ids(self) -> list[str]:
        return [c.cell_id for c in self.cells]


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    for key in ("name", "nominal_ah", "cells"):
        if key not in raw:
            raise FormatError(f"manifest {path} is missing key {key!r}")
    nominal = float(raw["nominal_ah"])
    cells = []
    for entry in raw["cells"]:
        if "id" not in entry or "path" not in entry:
            raise FormatError(f"manifest {path}: each cell needs 'id' and 'path'")
        csv_path = (path.parent / entry["path"]).resolve()
        cells.append(load_capacity_csv(csv_path, cell_id=entry["id"], nominal_ah=nominal))
    if not cells:
        raise DataError(f"manifest {path} lists no cells")
    return DatasetManifest(name=str(raw["name"]), nominal_ah=nominal, cells=cells)


def write_dataset(directory: str | Path, name: str, nominal_ah: float,
                  cells: Iterable[CapacitySeries]) -> Path:
    """Write cell CSVs plus a manifest under ``directory``; returns manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for series in cells:
        filename = f"{series.cell_id}.csv"
        write_capacity_csv(series, directory / filename)
        entries.append({"id": series.cell_id, "path": filename})
    manifest = {"name": name, "nominal_ah": nominal_ah, "cells": entries}
    manifest_path = directory / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path
