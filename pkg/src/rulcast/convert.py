"""Offline conversion of raw source files into the canonical capacity CSV.

Two source kinds are supported:

* ``nasa-mat`` — the instrument .mat containers used for the NASA battery
  aging sets (B0005 etc.): per-cycle records under ``<cell>/cycle`` where
  discharge cycles carry ``data.Capacity``.
* ``table`` — any tabular file (CSV, or Excel when pandas is installed)
  with one row per cycle and configurable cycle/capacity column names.

Both emit the canonical ``cycle,capacity_ah`` CSV consumed by the rest of
the package; cycles are renumbered 1..n in source order.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .data import CapacitySeries, write_capacity_csv
from .errors import DataError, FormatError


def convert_nasa_mat(mat_path: str | Path, out_csv: str | Path,
                     cell_id: str | None = None, nominal_ah: float = 2.0) -> CapacitySeries:
    """Extract discharge-cycle capacities from a NASA .mat file."""
    from scipy.io import loadmat  # heavy import, keep local

    mat_path = Path(mat_path)
    cell_id = cell_id or mat_path.stem
    try:
        mat = loadmat(mat_path, simplify_cells=True)
    except OSError as exc:
        raise DataError(f"cannot read {mat_path}: {exc}") from exc
    except (ValueError, NotImplementedError) as exc:
        raise FormatError(f"{mat_path} is not a readable .mat container: {exc}") from exc

    keys = [k for k in mat if not k.startswith("__")]
    if cell_id not in mat:
        raise FormatError(f"{mat_path} has no entry {cell_id!r}; found {sorted(keys)}")
    entry = mat[cell_id]
    try:
        cycles = entry["cycle"]
    except (TypeError, KeyError, IndexError) as exc:
        raise FormatError(f"{mat_path}: entry {cell_id!r} has no 'cycle' records") from exc
    if isinstance(cycles, dict):
        cycles = [cycles]

    capacities: list[float] = []
    for record in np.atleast_1d(cycles):
        if str(record.get("type", "")) != "discharge":
            continue
        data = record.get("data", {})
        if "Capacity" not in data:
            continue
        capacities.append(float(np.atleast_1d(data["Capacity"]).reshape(-1)[0]))
    if not capacities:
        raise DataError(f"{mat_path}: no discharge cycles with a Capacity field")

    series = CapacitySeries.create(cell_id, capacities, nominal_ah)
    write_capacity_csv(series, out_csv)
    return series


def convert_table(src_path: str | Path, out_csv: str | Path,
                  capacity_col: str = "capacity", cycle_col: str | None = "cycle",
                  sheet: str | int | None = None, cell_id: str | None = None,
                  nominal_ah: float = 2.0) -> CapacitySeries:
    """Extract (cycle, capacity) pairs from a generic tabular file.

    Column matching is case-insensitive. With ``cycle_col=None`` the row
    order defines the cycle numbering. Expects one row per cycle; duplicate
    cycle indices are a data error.
    """
    src_path = Path(src_path)
    cell_id = cell_id or src_path.stem
    if src_path.suffix.lower() in (".xlsx", ".xls"):
        rows = _read_excel_rows(src_path, sheet)
    else:
        rows = _read_csv_rows(src_path)
    if not rows:
        raise DataError(f"{src_path}: no data rows")

    header = {name.strip().lower(): name for name in rows[0].keys()}
    cap_key = header.get(capacity_col.strip().lower())
    if cap_key is None:
        raise FormatError(
            f"{src_path}: no column {capacity_col!r}; found {sorted(header.values())}")
    cyc_key = None
    if cycle_col is not None:
        cyc_key = header.get(cycle_col.strip().lower())
        if cyc_key is None:
            raise FormatError(
                f"{src_path}: no column {cycle_col!r}; found {sorted(header.values())}")

    pairs: list[tuple[int, float]] = []
    seen: set[int] = set()
    for i, row in enumerate(rows, start=1):
        raw_cap = row[cap_key]
        if raw_cap is None or str(raw_cap).strip() == "":
            continue
        try:
            cap = float(raw_cap)
            cycle = int(float(row[cyc_key])) if cyc_key is not None else i
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{src_path}: row {i}: {exc}") from exc
        if cycle in seen:
            raise DataError(f"{src_path}: duplicate cycle index {cycle}")
        if cap <= 0:
            raise DataError(f"{src_path}: row {i}: non-positive capacity {cap}")
        seen.add(cycle)
        pairs.append((cycle, cap))
    if not pairs:
        raise DataError(f"{src_path}: no usable capacity values")
    pairs.sort(key=lambda p: p[0])

    series = CapacitySeries.create(cell_id, [cap for _, cap in pairs], nominal_ah)
    write_capacity_csv(series, out_csv)
    return series


def _read_csv_rows(path: Path) -> list[dict]:
    try:
        with open(path, encoding="utf-8-sig", newline="") as fh:
            return list(csv.DictReader(fh))
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc


def _read_excel_rows(path: Path, sheet) -> list[dict]:
    try:
        import pandas as pd
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise FormatError(
            f"reading {path} needs pandas (install the 'convert' extra)") from exc
    frame = pd.read_excel(path, sheet_name=sheet if sheet is not None else 0)
    return frame.to_dict(orient="records")
