"""Command-line interface: train, eval, ablate, sweep, synth, convert.

Configuration comes from a JSON file (--config) with command-line
overrides winning. Artifacts land under the output directory as
out/{cell}/{variant}/{seed}/ with an aggregate report per variant; all
artifact files are byte-identical across reruns with the same config and
seeds, except wall-clock values, which live only in run_meta.json and
trace.jsonl. Progress goes to stderr, machine-readable output to files
and stdout.

Exit codes: 0 success, 2 configuration/usage error, 3 data or format
error, 4 numerical abort (non-finite loss).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .convert import convert_nasa_mat, convert_table
from .data import (
    DatasetManifest,
    load_manifest,
    make_windows,
    merge_windows,
    leave_one_out,
    normalize,
    synthesize_degradation,
    write_dataset,
)
from .errors import (
    ConfigError,
    DataError,
    DimensionError,
    FormatError,
    MetricError,
    NumericsError,
    RulcastError,
    UsageError,
)
from .evaluation import (
    CALCE_REFERENCE,
    NASA_REFERENCE,
    EvalReport,
    aggregate_runs,
    evaluate,
    predict_curve,
    reference_gap,
    write_curve_csv,
)
from .model import ModelConfig, ModelVariant, build_model, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

VARIANT_ORDER = ["no_pe", "no_pe_no_attn", "no_mfnet", "no_ecnet", "series", "full"]

_EXIT_CODES = {
    ConfigError: 2,
    UsageError: 2,
    DimensionError: 2,
    DataError: 3,
    FormatError: 3,
    MetricError: 3,
    NumericsError: 4,
}

_MODEL_KEYS = {
    "window", "d_model", "heads", "d_ff", "stem_branch_channels",
    "dense_layers", "growth", "ec_blocks", "dropout_p", "positional",
}
_TRAIN_KEYS = {
    "lr", "betas", "eps", "max_epochs", "patience", "batch_size", "val_fraction",
}
_RUN_KEYS = {
    "dataset", "test_cell", "out_dir", "variant", "n_runs", "base_seed",
    "mode", "jobs", "model", "train",
}


@dataclass
class RunConfig:
    """Everything one benchmark run needs; see README for the key reference."""

    dataset: str
    test_cell: str
    out_dir: str
    variant: str = "full"
    n_runs: int = 10
    base_seed: int = 0
    mode: str = "teacher_forced"
    jobs: int = 1
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.n_runs < 1:
            raise ConfigError(f"n_runs must be >= 1, got {self.n_runs}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")
        if self.mode not in ("teacher_forced", "recursive"):
            raise ConfigError(f"mode must be teacher_forced or recursive, got {self.mode!r}")
        ModelVariant(self.variant)
        unknown = set(self.model) - _MODEL_KEYS
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        unknown = set(self.train) - _TRAIN_KEYS
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        if "window" not in self.model:
            raise ConfigError("model config needs a 'window' (T_w)")

    def model_config(self, seed: int, window: int | None = None) -> ModelConfig:
        kwargs = dict(self.model)
        if window is not None:
            kwargs["window"] = window
        try:
            cfg = ModelConfig(seed=seed, **kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad model config: {exc}") from exc
        cfg.validate()
        return cfg

    def train_config(self, seed: int) -> TrainConfig:
        kwargs = dict(self.train)
        if "betas" in kwargs:
            kwargs["betas"] = tuple(kwargs["betas"])
        try:
            cfg = TrainConfig(seed=seed, **kwargs)
        except TypeError as exc:
            raise ConfigError(f"bad train config: {exc}") from exc
        cfg.validate()
        return cfg


def load_run_config(args: argparse.Namespace) -> RunConfig:
    raw: dict = {}
    if getattr(args, "config", None):
        config_path = Path(args.config)
        if not config_path.exists():
            raise ConfigError(f"config file not found: {config_path}")
        try:
            with open(config_path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from exc
        unknown = set(raw) - _RUN_KEYS
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")

    overrides = {
        "dataset": getattr(args, "dataset", None),
        "test_cell": getattr(args, "cell", None),
        "out_dir": getattr(args, "out", None),
        "variant": getattr(args, "variant", None),
        "n_runs": getattr(args, "runs", None),
        "base_seed": getattr(args, "seed", None),
        "mode": getattr(args, "mode", None),
        "jobs": getattr(args, "jobs", None),
    }
    for key, value in overrides.items():
        if value is not None:
            raw[key] = value
    if getattr(args, "window", None) is not None:
        raw.setdefault("model", {})
        raw["model"] = dict(raw["model"])
        raw["model"]["window"] = args.window

    for required in ("dataset", "test_cell", "out_dir"):
        if required not in raw:
            raise ConfigError(f"missing required config key {required!r} "
                              f"(set it in --config or via the matching flag)")
    run = RunConfig(**{k: raw[k] for k in raw})
    run.validate()
    if not Path(run.dataset).exists():
        raise ConfigError(f"dataset manifest not found: {run.dataset}")
    return run


# ---------------------------------------------------------------------------
# single training run


def run_single_seed(
    manifest_path: str,
    test_cell: str,
    variant: str,
    model_kwargs: dict,
    train_kwargs: dict,
    seed: int,
    out_dir: Optional[str],
    quiet: bool = False,
) -> EvalReport:
    """Train one seed, evaluate on the held-out cell, write artifacts."""
    manifest = load_manifest(manifest_path)
    split = leave_one_out(manifest.cells, test_cell)

    model_cfg = ModelConfig(seed=seed, **model_kwargs)
    model_cfg.validate()
    train_cfg = TrainConfig(seed=seed, **{
        **train_kwargs,
        **({"betas": tuple(train_kwargs["betas"])} if "betas" in train_kwargs else {}),
    })
    train_cfg.validate()

    windows = merge_windows([
        make_windows(normalize(manifest.cell(cid)), model_cfg.window)
        for cid in split.train_cells
    ])
    model = build_model(model_cfg, ModelVariant(variant))

    progress = None
    if not quiet:
        def progress(epoch, train_mse, val_mse):
            print(f"[seed {seed}] epoch {epoch} train_mse {train_mse:.6g} "
                  f"val_mse {val_mse:.6g}", file=sys.stderr)

    import time as _time
    train_started = _time.perf_counter()
    model, trace = train(model, windows, train_cfg, progress=progress)
    train_seconds = _time.perf_counter() - train_started

    test_series = manifest.cell(test_cell)
    report = evaluate(model, test_series)

    if out_dir is not None:
        run_dir = Path(out_dir) / test_cell / variant / str(seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, run_dir / "checkpoint.json")
        trace.to_jsonl(run_dir / "trace.jsonl")
        report.write_json(run_dir / "report.json", include_timing=False)
        meta = {
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "train_seconds": train_seconds,
            "test_seconds": report.test_seconds,
            "ms_per_step": report.ms_per_step,
            "stopped_epoch": trace.stopped_epoch,
            "best_epoch": trace.best_epoch,
        }
        with open(run_dir / "run_meta.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        norm = normalize(test_series)
        start = model_cfg.window + 1
        write_curve_csv(run_dir / "curve_teacher_forced.csv", start,
                        report.true_curve, report.predicted_curve)
        recursive = predict_curve(model, norm, mode="recursive")
        write_curve_csv(run_dir / "curve_recursive.csv", start,
                        report.true_curve, recursive)
    return report


def _seed_worker(payload: dict) -> EvalReport:
    return run_single_seed(**payload)


def _train_variant(run: RunConfig, variant: str, window: int | None = None,
                   out_dir: Optional[str] = None, quiet: bool = False) -> EvalReport:
    """Train run.n_runs seeds of one variant and aggregate the reports."""
    seeds = [run.base_seed + i for i in range(run.n_runs)]
    model_kwargs = dict(run.model)
    if window is not None:
        model_kwargs["window"] = window
    payloads = [
        dict(manifest_path=run.dataset, test_cell=run.test_cell, variant=variant,
             model_kwargs=model_kwargs, train_kwargs=dict(run.train),
             seed=seed, out_dir=out_dir, quiet=quiet)
        for seed in seeds
    ]
    if run.jobs > 1 and len(payloads) > 1:
        with ProcessPoolExecutor(max_workers=run.jobs) as pool:
            reports = list(pool.map(_seed_worker, payloads))
    else:
        reports = [_seed_worker(p) for p in payloads]
    reports.sort(key=lambda r: r.seeds_used[0])
    return aggregate_runs(reports)


def _lookup_reference(manifest: DatasetManifest, cell_id: str) -> Optional[dict]:
    name = manifest.name.lower()
    if "nasa" in name:
        return NASA_REFERENCE.get(cell_id, NASA_REFERENCE["avg"])
    if "calce" in name:
        return CALCE_REFERENCE.get(cell_id, CALCE_REFERENCE["avg"])
    return None


def _write_aggregate(run: RunConfig, variant: str, aggregate: EvalReport,
                     out_dir: Path) -> Path:
    payload = aggregate.to_dict(include_timing=False)
    manifest = load_manifest(run.dataset)
    reference = _lookup_reference(manifest, run.test_cell)
    if reference is not None:
        payload["reference"] = reference
        payload["reference_gap"] = reference_gap(aggregate, reference)
        gap = payload["reference_gap"]
        print(f"[{run.test_cell}/{variant}] vs reference: "
              f"dR2 {gap['r2']:+.4f} dMAE {gap['mae']:+.4f} dRMSE {gap['rmse']:+.4f}",
              file=sys.stderr)
    path = out_dir / run.test_cell / variant / "aggregate.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    return path


_METRIC_COLUMNS = "cell variant r2 mae rmse rul_pred rul_true test_s ms_per_step"


def _print_report_line(report: EvalReport, variant: str) -> None:
    print(_METRIC_COLUMNS)
    print(f"{report.cell_id} {variant} {report.r2:.4f} {report.mae:.4f} "
          f"{report.rmse:.4f} {report.rul_pred} {report.rul_true} "
          f"{report.test_seconds:.4f} {report.ms_per_step:.3f}")


# ---------------------------------------------------------------------------
# commands


def cmd_train(args: argparse.Namespace) -> int:
    run = load_run_config(args)
    aggregate = _train_variant(run, run.variant, out_dir=run.out_dir, quiet=args.quiet)
    _write_aggregate(run, run.variant, aggregate, Path(run.out_dir))
    _print_report_line(aggregate, run.variant)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = load_manifest(args.dataset)
    series = manifest.cell(args.cell)
    report = evaluate(model, series)
    variant = model.variant.value
    _print_report_line(report, variant)
    if args.out:
        out_dir = Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        report.write_json(out_dir / "report.json", include_timing=False)
        meta = {
            "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
            "test_seconds": report.test_seconds,
            "ms_per_step": report.ms_per_step,
        }
        with open(out_dir / "run_meta.json", "w", encoding="utf-8", newline="\n") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")
        mode = args.mode or "teacher_forced"
        start = model.cfg.window + 1
        curve = (report.predicted_curve if mode == "teacher_forced"
                 else predict_curve(model, normalize(series), mode="recursive"))
        write_curve_csv(out_dir / f"curve_{mode}.csv", start, report.true_curve, curve)
    return 0


def cmd_ablate(args: argparse.Namespace) -> int:
    run = load_run_config(args)
    rows = []
    for variant in VARIANT_ORDER:
        aggregate = _train_variant(run, variant, out_dir=run.out_dir, quiet=args.quiet)
        _write_aggregate(run, variant, aggregate, Path(run.out_dir))
        rows.append((variant, aggregate))
        print(f"ablation {variant}: r2 {aggregate.r2:.4f} mae {aggregate.mae:.4f} "
              f"rmse {aggregate.rmse:.4f}", file=sys.stderr)
    table = Path(run.out_dir) / f"ablation_{run.test_cell}.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    with open(table, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("variant,r2,mae,rmse\n")
        for variant, agg in rows:
            fh.write(f"{variant},{agg.r2!r},{agg.mae!r},{agg.rmse!r}\n")
    print(f"wrote {table}")
    return 0


def cmd_sweep(args: argparse.Namespace) -> int:
    run = load_run_config(args)
    try:
        windows = sorted({int(w) for w in args.windows.split(",") if w.strip()})
    except ValueError as exc:
        raise ConfigError(f"bad --windows list {args.windows!r}: {exc}") from exc
    if not windows:
        raise ConfigError("--windows list is empty")
    manifest = load_manifest(run.dataset)
    shortest = min(manifest.cells, key=len)
    for t_w in windows:
        if t_w >= len(shortest):
            raise ConfigError(
                f"window {t_w} does not fit cell {shortest.cell_id!r} "
                f"of length {len(shortest)}")
    rows = []
    for t_w in windows:
        aggregate = _train_variant(run, run.variant, window=t_w,
                                   out_dir=str(Path(run.out_dir) / f"t{t_w}"),
                                   quiet=args.quiet)
        rows.append((t_w, aggregate))
        print(f"sweep T_w={t_w}: r2 {aggregate.r2:.4f} rmse {aggregate.rmse:.4f}",
              file=sys.stderr)
    table = Path(run.out_dir) / f"sweep_{run.test_cell}.csv"
    table.parent.mkdir(parents=True, exist_ok=True)
    with open(table, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("t_w,r2,mae,rmse\n")
        for t_w, agg in rows:
            fh.write(f"{t_w},{agg.r2!r},{agg.mae!r},{agg.rmse!r}\n")
    print(f"wrote {table}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    if args.cells < 1:
        raise ConfigError(f"--cells must be >= 1, got {args.cells}")
    rng = np.random.default_rng(args.seed)
    offsets = rng.integers(-args.cycles // 8, args.cycles // 8 + 1, size=args.cells)
    cell_seeds = np.random.SeedSequence(args.seed).generate_state(args.cells)
    cells = [
        synthesize_degradation(
            seed=int(cell_seeds[i]),
            cycles=max(10, args.cycles + int(offsets[i])),
            regen_rate=args.regen_rate,
            noise_sd=args.noise_sd,
            nominal_ah=args.nominal,
            cell_id=f"SYN{i + 1:03d}",
        )
        for i in range(args.cells)
    ]
    manifest_path = write_dataset(args.out, args.name, args.nominal, cells)
    print(f"wrote {manifest_path}")
    return 0


def cmd_convert(args: argparse.Namespace) -> int:
    if args.format == "nasa-mat":
        series = convert_nasa_mat(args.input, args.output, cell_id=args.cell,
                                  nominal_ah=args.nominal)
    else:
        series = convert_table(args.input, args.output,
                               capacity_col=args.capacity_col,
                               cycle_col=args.cycle_col or None,
                               sheet=args.sheet, cell_id=args.cell,
                               nominal_ah=args.nominal)
    print(f"wrote {args.output} ({len(series)} cycles, cell {series.cell_id})")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run config; flags override its keys")
    parser.add_argument("--dataset", help="dataset manifest path")
    parser.add_argument("--cell", help="test cell id (leave-one-out)")
    parser.add_argument("--variant", choices=VARIANT_ORDER, help="model variant")
    parser.add_argument("--window", type=int, help="sliding window length T_w")
    parser.add_argument("--seed", type=int, help="base seed; run i uses seed+i")
    parser.add_argument("--runs", type=int, help="number of seeds to train")
    parser.add_argument("--mode", choices=["teacher_forced", "recursive"],
                        help="curve mode for plots")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--jobs", type=int, help="parallel seed workers (default 1)")
    parser.add_argument("--quiet", action="store_true", help="suppress per-epoch progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rulcast",
        description="Train and evaluate the dual-path battery capacity forecaster.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train n seeds and aggregate the reports")
    _add_run_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on one cell")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--dataset", required=True)
    p_eval.add_argument("--cell", required=True)
    p_eval.add_argument("--mode", choices=["teacher_forced", "recursive"],
                        default="teacher_forced")
    p_eval.add_argument("--out", help="directory for report and curve files")
    p_eval.set_defaults(func=cmd_eval)

    p_ablate = sub.add_parser("ablate", help="train every variant under shared seeds")
    _add_run_flags(p_ablate)
    p_ablate.set_defaults(func=cmd_ablate)

    p_sweep = sub.add_parser("sweep", help="retrain per window size")
    _add_run_flags(p_sweep)
    p_sweep.add_argument("--windows", required=True,
                         help="comma-separated window sizes, e.g. 4,8,16,24,32")
    p_sweep.set_defaults(func=cmd_sweep)

    p_synth = sub.add_parser("synth", help="emit a synthetic degradation dataset")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--cells", type=int, default=4)
    p_synth.add_argument("--cycles", type=int, default=168)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--nominal", type=float, default=2.0)
    p_synth.add_argument("--regen-rate", type=float, default=0.02, dest="regen_rate")
    p_synth.add_argument("--noise-sd", type=float, default=0.003, dest="noise_sd")
    p_synth.add_argument("--name", default="synthetic")
    p_synth.set_defaults(func=cmd_synth)

    p_convert = sub.add_parser("convert", help="raw source file -> canonical CSV")
    p_convert.add_argument("--format", choices=["nasa-mat", "table"], required=True)
    p_convert.add_argument("--input", required=True)
    p_convert.add_argument("--output", required=True)
    p_convert.add_argument("--cell", help="cell id (default: input file stem)")
    p_convert.add_argument("--nominal", type=float, default=2.0)
    p_convert.add_argument("--capacity-col", default="capacity", dest="capacity_col")
    p_convert.add_argument("--cycle-col", default="cycle", dest="cycle_col")
    p_convert.add_argument("--sheet", help="Excel sheet name or index")
    p_convert.set_defaults(func=cmd_convert)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except RulcastError as exc:
        code = next((c for t, c in _EXIT_CODES.items() if isinstance(exc, t)), 2)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
