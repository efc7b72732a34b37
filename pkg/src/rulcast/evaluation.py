"""Metrics, degradation-curve prediction, RUL derivation, and reports.

Metrics are computed on the normalized-capacity scale over the test
cell's predictable region (cycles T_w+1..n), teacher-forced. Inference
timing wraps the per-step test loop with a wall clock and takes the
median of three repetitions.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import CapacitySeries, make_windows, normalize
from .errors import DataError, DimensionError, MetricError, UsageError
from .model import Model
from .tensor import no_grad

EOL_NORMALIZED = 0.70

# Published reference results for these benchmarks, used to report the
# reproduction gap alongside our own numbers.
NASA_REFERENCE = {
    "B0005": {"r2": 0.9613, "mae": 0.0277, "rmse": 0.0352},
    "B0006": {"r2": 0.9709, "mae": 0.0284, "rmse": 0.0374},
    "B0007": {"r2": 0.9689, "mae": 0.0205, "rmse": 0.0262},
    "B0018": {"r2": 0.9274, "mae": 0.0270, "rmse": 0.0343},
    "avg": {"r2": 0.9571, "mae": 0.0259, "rmse": 0.0333},
}
CALCE_REFERENCE = {
    "avg": {"r2": 0.9828, "mae": 0.0216, "rmse": 0.0277},
}


def r2(pred: Sequence[float], true: Sequence[float]) -> float:
    """Coefficient of determination: 1 - SS_res / SS_tot."""
    p, t = _paired(pred, true)
    mean = t.mean()
    ss_tot = float(((t - mean) ** 2).sum())
    if ss_tot == 0.0:
        raise MetricError("r2 is undefined for zero-variance targets")
    ss_res = float(((t - p) ** 2).sum())
    return 1.0 - ss_res / ss_tot


def mae(pred: Sequence[float], true: Sequence[float]) -> float:
    p, t = _paired(pred, true)
    return float(np.abs(p - t).mean())


def rmse(pred: Sequence[float], true: Sequence[float]) -> float:
    p, t = _paired(pred, true)
    return float(np.sqrt(((p - t) ** 2).mean()))


def mean_signed_error(pred: Sequence[float], true: Sequence[float]) -> float:
    """Mean of (pred - true); negative values mean under-estimation."""
    p, t = _paired(pred, true)
    return float((p - t).mean())


def _paired(pred, true) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(true, dtype=np.float64)
    if p.shape != t.shape:
        raise DimensionError(f"metric inputs differ in shape: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise DimensionError("metric inputs are empty")
    return p, t


# ---------------------------------------------------------------------------
# curves and RUL


def predict_curve(model: Model, series: CapacitySeries, mode: str = "teacher_forced"
                  ) -> np.ndarray:
    """Predicted normalized capacities for cycles T_w+1..n of ``series``.

    teacher_forced feeds each true past window; recursive warm-starts on
    the first true window and then feeds the model its own predictions.
    ``series`` must already be normalized. Runs in eval mode, one step at
    a time.
    """
    t_w = model.cfg.window
    values = series.capacities
    if values.size <= t_w:
        raise DataError(
            f"cell {series.cell_id}: needs more than {t_w} cycles to predict, has {values.size}")
    steps = values.size - t_w
    preds = np.empty(steps)
    with no_grad():
        if mode == "teacher_forced":
            for i in range(steps):
                preds[i] = model.forward(values[i:i + t_w]).item()
        elif mode == "recursive":
            window = values[:t_w].copy()
            for i in range(steps):
                preds[i] = model.forward(window).item()
                window[:-1] = window[1:]
                window[-1] = preds[i]
        else:
            raise UsageError(f"unknown prediction mode {mode!r}")
    return preds


def rul_at_eol(curve: Sequence[float], start_cycle: int,
               eol_norm: float = EOL_NORMALIZED) -> Optional[int]:
    """Cycles from ``start_cycle`` to the first value <= eol_norm.

    ``curve[0]`` is the value at ``start_cycle``; the crossing cycle is
    ``start_cycle + returned count``. First crossing wins even if the
    curve later regenerates above the threshold. None if never crossed.
    """
    arr = np.asarray(curve, dtype=np.float64)
    if arr.size == 0:
        raise DimensionError("rul_at_eol needs a nonempty curve")
    below = np.nonzero(arr <= eol_norm)[0]
    if below.size == 0:
        return None
    return int(below[0])


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    """Metrics, curves, RUL, and timing for one evaluation of one cell."""

    cell_id: str
    r2: float
    mae: float
    rmse: float
    mean_signed_error: float
    predicted_curve: list[float]
    true_curve: list[float]
    rul_pred: Optional[int]
    rul_true: Optional[int]
    test_seconds: float
    ms_per_step: float
    seeds_used: list[int] = field(default_factory=list)
    aggregation: str = "single"

    def __post_init__(self):
        if len(self.predicted_curve) != len(self.true_curve):
            raise DimensionError("predicted and true curves differ in length")

    def to_dict(self, include_timing: bool = True) -> dict:
        payload = asdict(self)
        if not include_timing:
            payload.pop("test_seconds")
            payload.pop("ms_per_step")
        return payload

    def write_json(self, path: str | Path, include_timing: bool = True) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.to_dict(include_timing), fh, sort_keys=True, separators=(",", ":"))
            fh.write("\n")


def write_curve_csv(path: str | Path, start_cycle: int,
                    true_curve: Sequence[float], pred_curve: Sequence[float]) -> None:
    """Plot-ready CSV: cycle,true_norm,pred_norm."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("cycle,true_norm,pred_norm\n")
        for i, (t, p) in enumerate(zip(true_curve, pred_curve)):
            fh.write(f"{start_cycle + i},{float(t)!r},{float(p)!r}\n")


def evaluate(model: Model, test_series: CapacitySeries, timing_reps: int = 3) -> EvalReport:
    """Teacher-forced metrics plus RUL and per-step timing on one test cell.

    ``test_series`` is a raw (Ah) series; it is normalized here. The
    prediction loop is repeated ``timing_reps`` times on a warmed cache
    and the median wall time is reported.
    """
    norm = normalize(test_series)
    t_w = model.cfg.window
    windows = make_windows(norm, t_w)  # validates length; also the truth source
    steps = len(windows)

    durations = []
    preds = None
    for _ in range(max(1, timing_reps)):
        started = time.perf_counter()
        preds = predict_curve(model, norm, mode="teacher_forced")
        durations.append(time.perf_counter() - started)
    seconds = statistics.median(durations)

    true_curve = windows.targets
    start_cycle = t_w + 1
    return EvalReport(
        cell_id=test_series.cell_id,
        r2=r2(preds, true_curve),
        mae=mae(preds, true_curve),
        rmse=rmse(preds, true_curve),
        mean_signed_error=mean_signed_error(preds, true_curve),
        predicted_curve=[float(v) for v in preds],
        true_curve=[float(v) for v in true_curve],
        rul_pred=rul_at_eol(preds, start_cycle),
        rul_true=rul_at_eol(true_curve, start_cycle),
        test_seconds=seconds,
        ms_per_step=seconds * 1000.0 / steps,
        seeds_used=[model.cfg.seed],
        aggregation="single",
    )


def aggregate_runs(reports: Sequence[EvalReport]) -> EvalReport:
    """Mean metrics over seeds; curves come from the median-RMSE run."""
    if not reports:
        raise UsageError("aggregate_runs needs at least one report")
    cells = {r.cell_id for r in reports}
    if len(cells) > 1:
        raise UsageError(f"cannot aggregate reports from different cells: {sorted(cells)}")
    if len(reports) == 1:
        return reports[0]
    by_rmse = sorted(range(len(reports)), key=lambda i: (reports[i].rmse, i))
    median_run = reports[by_rmse[(len(reports) - 1) // 2]]
    return EvalReport(
        cell_id=median_run.cell_id,
        r2=float(np.mean([r.r2 for r in reports])),
        mae=float(np.mean([r.mae for r in reports])),
        rmse=float(np.mean([r.rmse for r in reports])),
        mean_signed_error=float(np.mean([r.mean_signed_error for r in reports])),
        predicted_curve=list(median_run.predicted_curve),
        true_curve=list(median_run.true_curve),
        rul_pred=median_run.rul_pred,
        rul_true=median_run.rul_true,
        test_seconds=float(np.mean([r.test_seconds for r in reports])),
        ms_per_step=float(np.mean([r.ms_per_step for r in reports])),
        seeds_used=sorted(s for r in reports for s in r.seeds_used),
        aggregation="mean",
    )


def reference_gap(report: EvalReport, reference: dict[str, float]) -> dict[str, float]:
    """Signed difference (ours - reference) for r2, mae and rmse."""
    return {
        "r2": report.r2 - reference["r2"],
        "mae": report.mae - reference["mae"],
        "rmse": report.rmse - reference["rmse"],
    }
