"""Command-line front end: calibrate, arl-curve, monitor, simulate-data, weights-report.

Exit codes: 0 success, 1 calibration failure, 2 invalid spec or arguments,
3 missing or malformed calibration, 4 ragged subgroups, 5 training prefix too
short.
"""

from __future__ import annotations

import argparse
import csv
import io
import itertools
import json
import logging
import sys
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import simulation as sim
from .charts import (
    MIN_BUDGET,
    ChartConfig,
    ControlLimits,
    LimitStyle,
    calibrate,
    estimate_limits,
    monitor,
)
from .errors import AuxChartError, CalibrationRangeError, PrecisionError
from .estimators import ALL_KINDS, EstimatorKind, WeightSource, evaluate, moments_from_pairs, weights_for
from .process import ProcessParameters, RngStream, ShiftSpec, _check_n, draw_pairs

log = logging.getLogger(__name__)

EXIT_CALIBRATION = 1
EXIT_INVALID = 2
EXIT_NO_CALIBRATION = 3
EXIT_RAGGED = 4
EXIT_SHORT_PREFIX = 5
MIN_PREFIX = 10

FULL_DESIGN = {"n": [5, 10, 15], "rho": [0.3, 0.6, 0.9], "target_arl0": [200, 371, 500]}
SPEC_KEYS = {
    "kinds", "n", "rho", "mu_y", "mu_x", "sigma_y", "sigma_x", "target_arl0", "style", "grid",
    "cells", "reps", "seed", "output", "budget", "tolerance", "weights_source", "cap",
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fmt(value: float) -> str:
    # shortest string that round-trips to the same double
    return repr(float(value))


def _as_list(value: Any) -> list:
    return list(value) if isinstance(value, (list, tuple)) else [value]


# ---------------------------------------------------------------- experiment spec


@dataclass(frozen=True)
class Cell:
    n: int
    rho: float
    target_arl0: float

    @property
    def label(self) -> str:
        return f"n{self.n}_rho{self.rho:g}_arl{self.target_arl0:g}"


@dataclass(frozen=True)
class ExperimentSpec:
    kinds: tuple[EstimatorKind, ...]
    cells: tuple[Cell, ...]
    mu_y: float = 5.0
    mu_x: float = 5.0
    sigma_y: float = 1.0
    sigma_x: float = 1.0
    style: LimitStyle = LimitStyle.THREE_SIGMA
    grid: sim.ShiftGrid = sim.ShiftGrid()
    reps: int = sim.DEFAULT_REPS
    seed: int = 0
    budget: int = MIN_BUDGET
    tolerance: float = 0.02
    weights_source: WeightSource = WeightSource.EXACT
    cap: int = sim.DEFAULT_CAP
    output: str | None = None

    def params(self, cell: Cell) -> ProcessParameters:
        return ProcessParameters(self.mu_y, self.mu_x, self.sigma_y, self.sigma_x, cell.rho)

    def config(self, kind: EstimatorKind, cell: Cell, coefficient: float | None = None) -> ChartConfig:
        if coefficient is None:
            coefficient = 3.0 if self.style is LimitStyle.THREE_SIGMA else 1.0 / cell.target_arl0
        return ChartConfig(kind, cell.n, self.style, coefficient, cell.target_arl0, self.weights_source)

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentSpec":
        """Validate every field before any computation starts.

        ``"grid": "full"`` (or ``"cells": "full"``) expands the 27-cell
        matrix n x rho x target ARL; a list under ``grid`` is the shift grid.
        """
        if not isinstance(raw, dict):
            raise AuxChartError("spec must be a JSON object")
        unknown = set(raw) - SPEC_KEYS
        if unknown:
            raise AuxChartError(f"unknown spec keys: {sorted(unknown)}")
        raw = dict(raw)
        if "kinds" not in raw:
            raise AuxChartError("spec needs a 'kinds' list")
        kinds = tuple(EstimatorKind(k) for k in _as_list(raw["kinds"]))
        if not kinds:
            raise AuxChartError("'kinds' must not be empty")
        if len(set(kinds)) != len(kinds):
            raise AuxChartError("'kinds' contains duplicates")
        grid = raw.get("grid", list(sim.DEFAULT_GRID))
        full = raw.get("cells") == "full" or grid == "full"
        if grid == "full":
            grid = list(sim.DEFAULT_GRID)
        if full:
            for key in FULL_DESIGN:
                if key in raw:
                    raise AuxChartError(f"'{key}' conflicts with the full cell design")
            raw.update(FULL_DESIGN)
        elif "cells" in raw:
            raise AuxChartError("'cells' only accepts \"full\"")
        for key in ("n", "rho", "target_arl0"):
            if key not in raw:
                raise AuxChartError(f"spec needs '{key}'")
        cells = []
        for n, rho, target in itertools.product(
            _as_list(raw["n"]), _as_list(raw["rho"]), _as_list(raw["target_arl0"])
        ):
            if isinstance(n, bool) or not isinstance(n, int):
                raise AuxChartError(f"n must be an integer, got {n!r}")
            _check_n(n)
            cells.append(Cell(n, float(rho), float(target)))
        if len(set(cells)) != len(cells):
            raise AuxChartError("duplicate cells in spec")
        spec = cls(
            kinds=kinds,
            cells=tuple(cells),
            mu_y=float(raw.get("mu_y", 5.0)),
            mu_x=float(raw.get("mu_x", 5.0)),
            sigma_y=float(raw.get("sigma_y", 1.0)),
            sigma_x=float(raw.get("sigma_x", 1.0)),
            style=LimitStyle(raw.get("style", LimitStyle.THREE_SIGMA.value)),
            grid=sim.ShiftGrid(tuple(_as_list(grid))),
            reps=int(raw.get("reps", sim.DEFAULT_REPS)),
            seed=int(raw.get("seed", 0)),
            budget=int(raw.get("budget", MIN_BUDGET)),
            tolerance=float(raw.get("tolerance", 0.02)),
            weights_source=WeightSource(raw.get("weights_source", WeightSource.EXACT.value)),
            cap=int(raw.get("cap", sim.DEFAULT_CAP)),
            output=raw.get("output"),
        )
        # owning types validate the rest
        for cell in spec.cells:
            spec.config(EstimatorKind.T0, cell)
            spec.params(cell)
        if spec.seed < 0:
            raise AuxChartError("seed must be non-negative")
        if spec.reps < sim.MIN_REPS:
            raise AuxChartError(f"reps must be at least {sim.MIN_REPS}")
        if spec.budget < MIN_BUDGET:
            raise AuxChartError(f"budget must be at least {MIN_BUDGET}")
        if not 0 < spec.tolerance < 1:
            raise AuxChartError("tolerance must lie in (0, 1)")
        if spec.cap < 1:
            raise AuxChartError("cap must be positive")
        return spec


def load_spec(path: str) -> ExperimentSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(EXIT_INVALID, f"cannot read spec {path}: {exc}") from exc
    try:
        return ExperimentSpec.from_dict(raw)
    except (AuxChartError, ValueError, TypeError) as exc:
        raise CliError(EXIT_INVALID, f"invalid spec {path}: {exc}") from exc


def _output_path(args_output: str | None, spec: ExperimentSpec | None) -> Path:
    out = args_output or (spec.output if spec else None)
    if not out:
        raise CliError(EXIT_INVALID, "no output path given (use --output or the spec's 'output')")
    return Path(out)


# ---------------------------------------------------------------- calibrate


def _record_key(kind, n, rho, target, style) -> tuple:
    return (str(kind), int(n), float(rho), float(target), str(style))


def cmd_calibrate(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    out = _output_path(args.output, spec)
    records = []
    for cell in spec.cells:
        params = spec.params(cell)
        for kind in spec.kinds:
            config = spec.config(kind, cell)
            try:
                result = calibrate(
                    config, params, spec.budget, spec.tolerance, RngStream(spec.seed), args.workers,
                    cap=spec.cap,
                )
            except (CalibrationRangeError, PrecisionError) as exc:
                raise CliError(EXIT_CALIBRATION, f"calibration failed for {kind} {cell.label}: {exc}") from exc
            log.info("%s %s coefficient=%.6g arl=%.2f", kind, cell.label, result.config.coefficient, result.achieved_arl)
            records.append({
                "kind": str(kind),
                "n": cell.n,
                "rho": cell.rho,
                "target_arl0": cell.target_arl0,
                "style": str(spec.style),
                "coefficient": result.config.coefficient,
                "achieved_arl": result.achieved_arl,
                "arl_se": result.arl_se,
                "seed": spec.seed,
                "budget": spec.budget,
                "capped_runs": result.capped_runs,
                "weights_source": str(spec.weights_source),
                **result.limits.to_dict(),
            })
    out.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")
    return 0


def load_calibration(path: str) -> dict[tuple, dict]:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(EXIT_NO_CALIBRATION, f"cannot read calibration {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_NO_CALIBRATION, f"malformed calibration JSON {path}: {exc}") from exc
    if not isinstance(data, list):
        raise CliError(EXIT_NO_CALIBRATION, f"malformed calibration {path}: expected a list of records")
    table = {}
    for i, rec in enumerate(data):
        try:
            key = _record_key(rec["kind"], rec["n"], rec["rho"], rec["target_arl0"], rec["style"])
            limits = ControlLimits(float(rec["lcl"]), float(rec["cl"]), float(rec["ucl"]))
            float(rec["coefficient"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CliError(EXIT_NO_CALIBRATION, f"malformed calibration record {i}: {exc!r}") from exc
        table[key] = {**rec, "limits": limits}
    return table


# ---------------------------------------------------------------- arl-curve


def _combined_csv(profiles: dict[EstimatorKind, sim.ArlProfile]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "delta", "arl", "sdrl", "se"])
    for kind, profile in profiles.items():
        for e in profile.entries:
            w.writerow([str(kind), _fmt(e.delta), _fmt(e.arl), _fmt(e.sdrl), _fmt(e.se)])
    return buf.getvalue()


def cmd_arl_curve(args: argparse.Namespace) -> int:
    spec = load_spec(args.spec)
    table = load_calibration(args.calibration)
    out = _output_path(args.output, spec)
    # every requested cell must be calibrated before any simulation starts
    plan = []
    for cell in spec.cells:
        charts = []
        for kind in spec.kinds:
            key = _record_key(kind, cell.n, cell.rho, cell.target_arl0, spec.style)
            if key not in table:
                raise CliError(
                    EXIT_NO_CALIBRATION,
                    f"missing calibration for kind={key[0]} n={key[1]} rho={key[2]:g} target_arl0={key[3]:g} style={key[4]}",
                )
            rec = table[key]
            charts.append((kind, spec.config(kind, cell, float(rec["coefficient"])), rec["limits"]))
        plan.append((cell, charts))
    out.mkdir(parents=True, exist_ok=True)
    for cell, charts in plan:
        params = spec.params(cell)
        per_delta = [
            sim.compare_arl(
                [(c, lim) for _, c, lim in charts], params, ShiftSpec(d), spec.reps, spec.seed, spec.cap, args.workers,
            )
            for d in spec.grid.deltas
        ]
        profiles = {
            kind: sim.ArlProfile(tuple(entries[i] for entries in per_delta))
            for i, (kind, _, _) in enumerate(charts)
        }
        for kind, profile in profiles.items():
            (out / f"{kind}_{cell.label}.csv").write_text(profile.to_csv(), encoding="utf-8")
        (out / f"curves_{cell.label}.csv").write_text(_combined_csv(profiles), encoding="utf-8")
        if len(spec.grid.positive) >= 3:
            summary = sim.performance_summary(profiles)
            payload = [s.to_dict() for s in summary.values()]
            (out / f"summary_{cell.label}.json").write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------- monitor


def _read_rows(path: str) -> tuple[list[str], list[dict]]:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            return list(reader.fieldnames or []), list(reader)
    except OSError as exc:
        raise CliError(EXIT_INVALID, f"cannot read data {path}: {exc}") from exc


def _params_from_args(args: argparse.Namespace) -> ProcessParameters:
    try:
        return ProcessParameters(args.mu_y, args.mu_x, args.sigma_y, args.sigma_x, args.rho)
    except AuxChartError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from exc


def _statistics_from_pairs(rows: list[dict], args: argparse.Namespace) -> tuple[list[str], np.ndarray]:
    groups: dict[str, list[tuple[float, float]]] = {}
    for row in rows:
        groups.setdefault(row["subgroup"], []).append((float(row["y"]), float(row["x"])))
    sizes = {len(v) for v in groups.values()}
    if len(sizes) != 1:
        raise CliError(EXIT_RAGGED, f"ragged subgroups: sizes {sorted(sizes)}")
    n = sizes.pop()
    if n < 2:
        raise CliError(EXIT_RAGGED, "subgroups need at least 2 observations")
    kind = EstimatorKind(args.kind)
    params = _params_from_args(args)
    data = np.array(list(groups.values()))
    y_bar, x_bar, slope, bad = moments_from_pairs(data[:, :, 0], data[:, :, 1])
    if kind.needs_slope and bad.any():
        raise CliError(EXIT_INVALID, f"subgroups {[k for k, b in zip(groups, bad) if b]} have zero spread in x")
    weights = weights_for(params, n, args.weights_source) if kind.needs_weights else None
    return list(groups), evaluate(kind, y_bar, x_bar, slope, params, weights)


def cmd_monitor(args: argparse.Namespace) -> int:
    fields, rows = _read_rows(args.data)
    if not rows:
        raise CliError(EXIT_INVALID, "data file has no rows")
    try:
        if args.column:
            if args.column not in fields:
                raise CliError(EXIT_INVALID, f"column {args.column!r} not in {fields}")
            labels = [r["subgroup"] for r in rows]
            values = np.array([float(r[args.column]) for r in rows])
        elif "statistic" in fields:
            labels = [r["subgroup"] for r in rows]
            values = np.array([float(r["statistic"]) for r in rows])
        elif {"subgroup", "y", "x"} <= set(fields):
            labels, values = _statistics_from_pairs(rows, args)
        else:
            raise CliError(EXIT_INVALID, f"unrecognised columns {fields}")
    except (KeyError, ValueError) as exc:
        if isinstance(exc, AuxChartError):
            raise CliError(EXIT_INVALID, str(exc)) from exc
        raise CliError(EXIT_INVALID, f"bad data value: {exc}") from exc
    if len(set(labels)) != len(labels):
        raise CliError(EXIT_INVALID, "duplicate subgroup labels")
    prefix = args.prefix
    if prefix < MIN_PREFIX:
        raise CliError(EXIT_SHORT_PREFIX, f"training prefix {prefix} is shorter than {MIN_PREFIX} subgroups")
    if prefix > len(values):
        raise CliError(EXIT_SHORT_PREFIX, f"training prefix {prefix} exceeds the {len(values)} subgroups available")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        limits = estimate_limits(values[:prefix], args.coefficient)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    changepoint = prefix if args.changepoint is None else args.changepoint
    report = monitor(values, limits, changepoint)
    payload = {
        **report.to_dict(),
        "signal_count": report.count,
        "signals_after": report.count_after(changepoint),
        "changepoint": changepoint,
        "prefix": prefix,
        "coefficient": args.coefficient,
        **limits.to_dict(),
        "degenerate_sd": bool(caught),
    }
    Path(args.output).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    if args.annotated:
        flags = limits.signals(values)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subgroup", "statistic", "lcl", "ucl", "signal"])
        for label, v, f in zip(labels, values, flags):
            w.writerow([label, _fmt(v), _fmt(limits.lcl), _fmt(limits.ucl), int(f)])
        Path(args.annotated).write_text(buf.getvalue(), encoding="utf-8")
    return 0


# ---------------------------------------------------------------- simulate-data


def cmd_simulate_data(args: argparse.Namespace) -> int:
    params = _params_from_args(args)
    if args.subgroups < 1 or not 0 <= args.changepoint < args.subgroups:
        raise CliError(EXIT_INVALID, "need 0 <= changepoint < subgroups")
    try:
        _check_n(args.n)
        shift = ShiftSpec(args.delta)
    except AuxChartError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from exc
    stream = RngStream(args.seed)
    y0, x0 = draw_pairs(params, args.n, ShiftSpec(0.0), stream.child(0).generator, args.changepoint)
    y1, x1 = draw_pairs(params, args.n, shift, stream.child(1).generator, args.subgroups - args.changepoint)
    y, x = np.concatenate([y0, y1]), np.concatenate([x0, x1])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subgroup", "y", "x"])
    for g in range(args.subgroups):
        for yi, xi in zip(y[g], x[g]):
            w.writerow([g + 1, _fmt(yi), _fmt(xi)])
    Path(args.output).write_text(buf.getvalue(), encoding="utf-8")
    return 0


# ---------------------------------------------------------------- weights-report


def cmd_weights_report(args: argparse.Namespace) -> int:
    from .estimators import weights_report

    params = _params_from_args(args)
    try:
        _check_n(args.n)
    except AuxChartError as exc:
        raise CliError(EXIT_INVALID, str(exc)) from exc
    text = json.dumps(weights_report(params, args.n), indent=2) + "\n"
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------- parser


def _add_process_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mu-y", type=float, default=5.0)
    p.add_argument("--mu-x", type=float, default=5.0)
    p.add_argument("--sigma-y", type=float, default=1.0)
    p.add_argument("--sigma-x", type=float, default=1.0)
    p.add_argument("--rho", type=float, default=0.9)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="auxchart", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("calibrate", help="calibrate limit coefficients to target in-control ARLs")
    p.add_argument("spec", help="experiment spec JSON")
    p.add_argument("-o", "--output", help="calibration JSON to write")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("arl-curve", help="ARL profiles over the shift grid")
    p.add_argument("spec", help="experiment spec JSON")
    p.add_argument("-c", "--calibration", required=True, help="calibration JSON from 'calibrate'")
    p.add_argument("-o", "--output", help="directory for the profile CSVs")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_arl_curve)

    p = sub.add_parser("monitor", help="flag out-of-control subgroups in a data file")
    p.add_argument("data", help="CSV with subgroup,y,x or subgroup,statistic")
    p.add_argument("-o", "--output", required=True, help="signal report JSON to write")
    p.add_argument("--annotated", help="optional annotated CSV to write")
    p.add_argument("--kind", default="T0", choices=[k.value for k in ALL_KINDS])
    p.add_argument("--column", help="read precomputed statistics from this column")
    p.add_argument("--prefix", type=int, default=30, help="training subgroups for the limits")
    p.add_argument("--coefficient", type=float, default=3.0, help="L in mean +/- L*sd")
    p.add_argument("--changepoint", type=int, default=None, help="defaults to the prefix length")
    p.add_argument("--weights-source", default=WeightSource.EXACT.value, choices=[s.value for s in WeightSource])
    _add_process_args(p)
    p.set_defaults(func=cmd_monitor)

    p = sub.add_parser("simulate-data", help="generate subgroups with a mean shift after a changepoint")
    p.add_argument("-o", "--output", required=True, help="data CSV to write")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("--subgroups", type=int, default=50)
    p.add_argument("--changepoint", type=int, default=30)
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    _add_process_args(p)
    p.set_defaults(func=cmd_simulate_data)

    p = sub.add_parser("weights-report", help="compare T2/T3 weight sources and their MSEs")
    p.add_argument("--n", type=int, default=5)
    p.add_argument("-o", "--output", help="JSON file (default stdout)")
    _add_process_args(p)
    p.set_defaults(func=cmd_weights_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "seed", 0) is not None and getattr(args, "seed", 0) < 0:
        print("error: seed must be non-negative", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except AuxChartError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
