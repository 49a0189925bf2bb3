"""Command-line interface: dataset/config formats and report emission.

Subcommands: ``synth`` (generate a cohort), ``experts`` (export expert
pools), ``tune`` (IR-optimal learning rates), ``predict`` (single-patient
prediction), ``evaluate`` (the full cross-validated experiment) and
``report`` (rebuild IR tables and p-values from a records file).

Datasets are JSON Lines, one patient per line:

    {"id": "p00001", "observations": [{"date": 0.0, "values": [...]}, ...]}

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import evaluation, synthdata
from .aggregation import flat_predict, hierarchical_predict, rg_optimal_eta
from .config import RunConfig, run_config_from_dict
from .core import PatientSeries
from .evaluation import (
    EvaluationRecord,
    ExperimentReport,
    assemble_ir_curves,
    build_fold_model,
    compute_pvalues,
    method_label,
    run_experiment,
    tune_etas,
)
from .experts import dump_pools, fit_pool_to_target
from .synthdata import CohortConfig, cohort_config_from_dict

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3

STRATEGY_CHOICES = ("lr", "sc", "tslr", "flat", "hier", "all")


class DataError(Exception):
    """Unreadable or invalid input data (exit code 2)."""


class UsageError(Exception):
    """Inconsistent flags or arguments (exit code 1)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Dataset and config I/O
# ---------------------------------------------------------------------------


def read_dataset(path) -> list[PatientSeries]:
    cohort = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                obs = obj["observations"]
                dates = [o["date"] for o in obs]
                fields = [o["values"] for o in obs]
                cohort.append(PatientSeries(str(obj["id"]), dates, fields))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not cohort:
        raise DataError(f"dataset {path} contains no patients")
    return cohort


def write_dataset(path, cohort: list[PatientSeries]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for series in cohort:
            obj = {
                "id": series.patient_id,
                "observations": [
                    {"date": float(d), "values": [float(v) for v in row]}
                    for d, row in zip(series.dates, series.fields)
                ],
            }
            fh.write(json.dumps(obj))
            fh.write("\n")


def _load_json(path, what: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise DataError(f"cannot open {what} {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{what} {path} is not valid JSON: {exc}") from exc


def load_cohort_config(path, seed: int | None) -> CohortConfig:
    data = _load_json(path, "cohort config") if path else {}
    if seed is not None:
        data["seed"] = seed
    try:
        return cohort_config_from_dict(data)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid cohort config: {exc}") from exc


def load_run_config(args) -> RunConfig:
    data = _load_json(args.config, "run config") if args.config else {}
    try:
        config = run_config_from_dict(data)
    except (TypeError, ValueError) as exc:
        raise DataError(f"invalid run config: {exc}") from exc
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "strategy", None) and args.strategy != "all":
        overrides["strategies"] = (args.strategy,)
    if getattr(args, "update", None):
        overrides["update"] = args.update
    if getattr(args, "folds", None):
        overrides["folds"] = args.folds
    if getattr(args, "jobs", None):
        overrides["n_jobs"] = args.jobs
    if getattr(args, "k", None):
        overrides["k"] = args.k
    if getattr(args, "c", None):
        overrides["c"] = args.c
    if getattr(args, "min_cluster_size", None):
        overrides["min_cluster_size"] = args.min_cluster_size
    if getattr(args, "d", None):
        overrides["d"] = args.d
    eta = getattr(args, "eta", None)
    if eta:
        if eta in ("ir", "rg"):
            overrides["eta_choices"] = (eta,)
        else:
            try:
                overrides["fixed_eta"] = float(eta)
            except ValueError as exc:
                raise UsageError(f"--eta must be 'ir', 'rg' or a number: {eta}") from exc
            overrides["eta_choices"] = ()
    try:
        return config.with_overrides(**overrides)
    except ValueError as exc:
        raise DataError(f"invalid run config: {exc}") from exc


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------

_CHOICE_ORDER = {"ir": 0, "rg": 1, "fix": 2, "best": 3}
_STRATEGY_ORDER = {"lr": 0, "tslr": 1, "sc": 2, "flat": 3, "hier": 4, "best": 5}


def _split_label(label: str) -> tuple[str, str]:
    strategy, _, choice = label.partition("[")
    return strategy, choice.rstrip("]")


def _label_key(label: str) -> tuple[int, int]:
    strategy, choice = _split_label(label)
    return (_STRATEGY_ORDER.get(strategy, 99), _CHOICE_ORDER.get(choice, 99))


def write_records_csv(path, records: list[EvaluationRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["patient_id", "n", "method", "rmse_method", "rmse_lr_baseline", "series_length"]
        )
        for r in records:
            writer.writerow(
                [r.patient_id, r.n, r.method, repr(r.rmse_method),
                 repr(r.rmse_lr_baseline), r.series_length]
            )


def read_records_csv(path) -> list[EvaluationRecord]:
    records = []
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot open records {path}: {exc}") from exc
    with fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                records.append(
                    EvaluationRecord(
                        patient_id=row["patient_id"],
                        n=int(row["n"]),
                        method=row["method"],
                        rmse_method=float(row["rmse_method"]),
                        rmse_lr_baseline=float(row["rmse_lr_baseline"]),
                        series_length=int(row["series_length"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    if not records:
        raise DataError(f"records file {path} is empty")
    return records


def write_ir_table_csv(path, ir_curves, n_range) -> None:
    """Rows strategy x eta choice, columns n (printed to 6 significant digits)."""
    n_lo, n_hi = n_range
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "eta"] + [f"n={n}" for n in range(n_lo, n_hi + 1)])
        for label in sorted(ir_curves, key=_label_key):
            strategy, choice = _split_label(label)
            row = [strategy, choice]
            for n in range(n_lo, n_hi + 1):
                point = ir_curves[label].get(n)
                row.append("" if point is None else f"{point.ir:.6g}")
            writer.writerow(row)


def write_eta_curves_csv(path, tuning_curves, grid) -> None:
    """IR against the grid multiplier (eta * sqrt(n)) for every strategy and n."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["strategy", "n", "multiplier", "eta", "ir"])
        for strategy in sorted(tuning_curves, key=lambda s: _STRATEGY_ORDER.get(s, 99)):
            for n in sorted(tuning_curves[strategy]):
                curve = tuning_curves[strategy][n]
                for g, ir in zip(grid, curve):
                    writer.writerow(
                        [strategy, n, repr(float(g)), repr(float(g / math.sqrt(n))),
                         repr(float(ir))]
                    )


def _ir_curves_jsonable(ir_curves):
    return {
        label: {
            str(n): {
                "ir": point.ir,
                "count": point.count,
                "stdev": point.stdev,
                "excluded": point.excluded,
            }
            for n, point in curve.items()
        }
        for label, curve in ir_curves.items()
    }


def write_summary_json(path, report: ExperimentReport) -> None:
    config = report.config
    summary = {
        "config": {
            "d": config.d,
            "k": config.k,
            "c": config.c,
            "min_cluster_size": config.min_cluster_size,
            "folds": config.folds,
            "n_range": list(config.n_range),
            "seed": config.seed,
            "strategies": list(config.strategies),
            "eta_choices": list(config.eta_choices),
            "fixed_eta": config.fixed_eta,
            "update": config.update,
            "grid": [float(g) for g in report.grid],
        },
        "tested_patients": len(report.tested),
        "pool_sizes": report.pool_sizes,
        "ir": _ir_curves_jsonable(report.ir_curves),
        "tuned_etas": [
            {s: {str(n): eta for n, eta in per_n.items()} for s, per_n in fold.items()}
            for fold in report.tuned_etas
        ],
        "pvalues": report.pvalues,
        "warnings": report.warnings,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_files(out_dir, report: ExperimentReport) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_records_csv(out / "records.csv", report.records)
    write_ir_table_csv(out / "ir_table.csv", report.ir_curves, report.config.n_range)
    if report.tuning_curves:
        write_eta_curves_csv(out / "ir_vs_eta.csv", report.tuning_curves, report.grid)
    write_summary_json(out / "summary.json", report)
    with open(out / "pvalues.json", "w", encoding="utf-8") as fh:
        json.dump(report.pvalues, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return sorted(p for p in out.iterdir())


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    config = load_cohort_config(args.config, args.seed)
    cohort, truth = synthdata.generate_cohort(config)
    write_dataset(args.out, cohort)
    truth_path = args.truth or f"{args.out}.truth.json"
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(truth, fh, sort_keys=True)
        fh.write("\n")
    print(f"wrote {len(cohort)} patients to {args.out} (truth: {truth_path})")
    return EXIT_OK


def cmd_experts(args) -> int:
    config = load_run_config(args)
    cohort = read_dataset(args.dataset)
    d = cohort[0].d
    if d != config.d:
        config = config.with_overrides(d=d)
    try:
        model = build_fold_model(cohort, config, seed=config.seed)
    except evaluation.FoldSkipped as exc:
        raise DataError(str(exc)) from exc
    dump_pools(args.out, list(model.pools), d)
    sizes = ", ".join(f"{k}={v}" for k, v in model.pool_sizes().items())
    print(f"wrote expert pools ({sizes}) to {args.out}")
    return EXIT_OK


def cmd_tune(args) -> int:
    config = load_run_config(args)
    cohort = read_dataset(args.dataset)
    if cohort[0].d != config.d:
        config = config.with_overrides(d=cohort[0].d)
    result = tune_etas(cohort, config, config.seed)
    payload = {
        "grid": [float(g) for g in config.grid],
        "etas": {
            s: {str(n): eta for n, eta in per_n.items()}
            for s, per_n in result.etas.items()
        },
        "curves": {
            s: {str(n): [float(v) for v in curve] for n, curve in per_n.items()}
            for s, per_n in result.curves.items()
        },
        "counts": {str(n): c for n, c in result.counts.items()},
        "warnings": result.warnings,
    }
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote IR-optimal learning rates to {args.out}")
    return EXIT_OK


def _resolve_predict_eta(args, strategy: str, model, n: int) -> float:
    if args.eta == "rg":
        sizes = model.pool_sizes()
        if strategy == "flat":
            return rg_optimal_eta(model.n_experts, n)
        if strategy == "hier":
            return rg_optimal_eta(len(model.pools), n)
        return rg_optimal_eta(sizes[strategy], n)
    if args.eta == "ir":
        if not args.eta_file:
            raise UsageError("--eta ir requires --eta-file (output of `vfagg tune`)")
        payload = _load_json(args.eta_file, "eta file")
        try:
            return float(payload["etas"][strategy][str(n)])
        except KeyError as exc:
            raise DataError(
                f"eta file has no entry for strategy {strategy!r} at n={n}"
            ) from exc
    try:
        return float(args.eta)
    except ValueError as exc:
        raise UsageError(f"--eta must be 'ir', 'rg' or a number: {args.eta}") from exc


def cmd_predict(args) -> int:
    if args.strategy == "all":
        raise UsageError("predict needs a single strategy, not 'all'")
    config = load_run_config(args)
    cohort = read_dataset(args.dataset)
    if cohort[0].d != config.d:
        config = config.with_overrides(d=cohort[0].d)
    by_id = {s.patient_id: s for s in cohort}
    if args.patient not in by_id:
        raise DataError(f"patient {args.patient!r} not in dataset")
    target = by_id[args.patient]
    if not 1 <= args.n < target.length:
        raise DataError(
            f"need 1 <= n < series length ({target.length}), got n={args.n}"
        )
    training = [s for s in cohort if s.patient_id != args.patient]
    try:
        model = build_fold_model(training, config, seed=config.seed)
    except evaluation.FoldSkipped as exc:
        raise DataError(str(exc)) from exc

    dates, fields = target.prefix(args.n)
    target_date = float(target.dates[-1])
    eta = _resolve_predict_eta(args, args.strategy, model, args.n)
    fitted = [fit_pool_to_target(pool, dates, fields) for pool in model.pools]
    named = dict(zip(model.pool_names, fitted))
    if args.strategy == "flat":
        pred = flat_predict(fitted, dates, fields, eta, target_date)
    elif args.strategy == "hier":
        pred = hierarchical_predict(
            fitted, dates, fields, eta, target_date, update=config.update
        )
    else:
        pred = flat_predict([named[args.strategy]], dates, fields, eta, target_date)
    actual = target.fields[-1]
    result = {
        "patient": args.patient,
        "n": args.n,
        "strategy": args.strategy,
        "eta": eta,
        "target_date": target_date,
        "prediction": [float(v) for v in pred],
        "actual": [float(v) for v in actual],
        "rmse": float(np.sqrt(np.mean((pred - actual) ** 2))),
        "rmse_lr_baseline": evaluation.lr_baseline_rmse(
            dates, fields, target_date, actual
        ),
    }
    text = json.dumps(result, indent=2, sort_keys=True)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.write("\n")
    else:
        print(text)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    config = load_run_config(args)
    cohort = read_dataset(args.dataset)
    if cohort[0].d != config.d:
        config = config.with_overrides(d=cohort[0].d)
    try:
        report = run_experiment(cohort, config)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    files = write_report_files(args.out, report)
    for f in files:
        print(f"wrote {f}")
    return EXIT_OK


def cmd_report(args) -> int:
    records = read_records_csv(args.records)
    tested = {}
    for rec in records:
        tested[rec.patient_id] = rec.series_length
    n_range = (args.n_min, args.n_max)
    ir_curves = assemble_ir_curves(records, tested, n_range)
    pvalues = compute_pvalues(records, n_range)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ir_table_csv(out / "ir_table.csv", ir_curves, n_range)
    with open(out / "pvalues.json", "w", encoding="utf-8") as fh:
        json.dump(pvalues, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {out / 'ir_table.csv'}")
    print(f"wrote {out / 'pvalues.json'}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing and entry point
# ---------------------------------------------------------------------------


def _add_run_config_flags(p: _Parser, *, strategy=True) -> None:
    p.add_argument("--config", help="run config JSON (flat document)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--d", type=int, help="field dimension override")
    p.add_argument("--k", type=int, help="spatial cluster count override")
    p.add_argument("--c", type=int, help="slope cluster count override")
    p.add_argument("--min-cluster-size", dest="min_cluster_size", type=int)
    p.add_argument("--folds", type=int, help="fold count override")
    p.add_argument("--jobs", type=int, help="parallel worker count")
    p.add_argument("--update", choices=("batch", "online"))
    if strategy:
        p.add_argument("--strategy", choices=STRATEGY_CHOICES, default="all")


def build_parser() -> _Parser:
    parser = _Parser(prog="vfagg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic cohort dataset")
    p.add_argument("--config", help="cohort config JSON")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=True, help="output dataset (JSON Lines)")
    p.add_argument("--truth", help="ground-truth sidecar path")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("experts", help="build and export expert pools")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output experts JSON")
    _add_run_config_flags(p)
    p.set_defaults(func=cmd_experts)

    p = sub.add_parser("tune", help="tune IR-optimal learning rates")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output etas JSON")
    _add_run_config_flags(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("predict", help="predict one patient's final observation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--patient", required=True)
    p.add_argument("--n", type=int, required=True, help="observed prefix length")
    p.add_argument("--eta", default="rg", help="'ir', 'rg' or a numeric value")
    p.add_argument("--eta-file", dest="eta_file", help="etas JSON from `vfagg tune`")
    p.add_argument("--out", help="write the prediction JSON here instead of stdout")
    _add_run_config_flags(p)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="run the full cross-validated experiment")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="output report directory")
    p.add_argument("--eta", help="'ir', 'rg' or a fixed numeric value (default both)")
    _add_run_config_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="rebuild IR tables from a records CSV")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-min", dest="n_min", type=int, default=2)
    p.add_argument("--n-max", dest="n_max", type=int, default=10)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - defensive
        log.exception("internal error: %s", exc)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
