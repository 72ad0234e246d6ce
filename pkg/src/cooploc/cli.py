"""Command-line harness: `cooploc run` and `cooploc sweep`.

Exit status: 0 when the run completed and every internal assertion
(chain connectedness, PSD factors, optimizer convergence, window bound)
held; 1 when a run finished but an assertion failed; 2 for configuration
or usage errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import sys
from pathlib import Path

from .errors import ConfigError
from .runner import (
    SWEEP_PARAMS,
    report_table,
    run_scenario,
    sweep_scenario,
    write_report,
)
from .scenario import load_scenario


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="cooploc",
        description="Multi-vehicle cooperative localization simulator",
    )
    sub = p.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one scenario (paired CL/IL)")
    run_p.add_argument("config", help="scenario YAML file")
    run_p.add_argument("--mode", choices=("cl", "il", "both"), default="both")
    run_p.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run_p.add_argument("--out", default=None, help="directory for report/trace files")

    sweep_p = sub.add_parser("sweep", help="re-run a scenario across parameter values")
    sweep_p.add_argument("config")
    sweep_p.add_argument("--param", required=True, help=f"one of {', '.join(SWEEP_PARAMS)}")
    sweep_p.add_argument(
        "--values", required=True, help="comma-separated numeric values, e.g. 0,0.25,0.5"
    )
    sweep_p.add_argument("--mode", choices=("cl", "il", "both"), default="both")
    sweep_p.add_argument("--seed", type=int, default=None)
    sweep_p.add_argument("--out", default=None)
    return p


def _parse_values(raw: str) -> list[float]:
    items = [s.strip() for s in raw.split(",") if s.strip()]
    try:
        return [float(s) for s in items]
    except ValueError as exc:
        raise ConfigError(f"--values: {exc}") from exc


def _cmd_run(args: argparse.Namespace) -> int:
    cfg = load_scenario(args.config)
    report = run_scenario(cfg, mode=args.mode, seed=args.seed)
    sys.stdout.write(report_table(report))
    if args.out:
        write_report(report, args.out)
    return 0 if report.assertions_passed else 1


def _cmd_sweep(args: argparse.Namespace) -> int:
    cfg = load_scenario(args.config)
    values = _parse_values(args.values)
    results = sweep_scenario(cfg, args.param, values, mode=args.mode, seed=args.seed)

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        [
            "param",
            "value",
            "mode",
            "pos_err_ave_m",
            "ori_err_ave_deg",
            "assoc_accuracy",
            "assertions_passed",
        ]
    )
    ok = True
    for value, report in results:
        ok = ok and report.assertions_passed
        for res in (report.cl, report.il):
            if res is None:
                continue
            acc = res.association_accuracy()
            w.writerow(
                [
                    args.param,
                    f"{value:g}",
                    res.mode,
                    f"{res.mean_position_error():.6f}",
                    f"{math.degrees(res.mean_orientation_error()):.6f}",
                    "" if math.isnan(acc) else f"{acc:.6f}",
                    int(report.assertions_passed),
                ]
            )
        sys.stdout.write(report_table(report))
        if args.out:
            write_report(report, Path(args.out) / f"{args.param}_{value:g}")
    if args.out and results:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "sweep_summary.csv").write_text(buf.getvalue())
    return 0 if ok else 1


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_sweep(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
