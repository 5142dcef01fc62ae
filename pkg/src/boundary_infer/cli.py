"""Command-line front end.

Subcommands
-----------
vimp      Test whether predictors ``--x`` improve a regression of ``--y`` on ``--w``.
ci        Confidence interval for the same improvement in fit.
mi-test   Independence test for two scalar columns.
simulate  Monte Carlo study on the built-in data-generating process.

Input is a UTF-8 CSV with a header row, '.' decimals and no missing cells.
Output is JSON by default (``--format csv`` writes a one-row CSV of the
scalar fields).  Every JSON payload carries ``schema_version``, the fully
resolved ``config`` and a ``timestamp``; the timestamp is the only field
that differs between runs with the same inputs, seed and thread count.

``simulate`` writes ``simulation.csv`` (one row per ``(n, predictor,
method)`` cell) and ``simulation.json`` (config, rows and per-replicate
records) into the ``--output`` directory.

Exit codes: 0 success, 2 input validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .errors import BoundaryInferError
from .gof_mi import MiConfig, PairSample, run_mi_test
from .gof_quadratic import Dataset
from .inference import InferenceConfig, run_inference
from .rkhs_basis import KernelSpec, median_heuristic
from .simstudy import METHODS, SimConfig, run_study

__all__ = ["main", "build_parser", "read_table", "InputError"]

SCHEMA_VERSION = 1
EXIT_OK = 0
EXIT_INPUT = 2
EXIT_NUMERIC = 3

log = logging.getLogger("boundary_infer")


class InputError(Exception):
    """Invalid command-line input; maps to exit code 2."""


def read_table(path) -> tuple[list[str], np.ndarray]:
    """Read a numeric CSV with a header; reject empty, non-numeric or non-finite cells."""
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path} is empty") from None
        except UnicodeDecodeError as exc:
            raise InputError(f"{path} is not UTF-8: {exc}") from exc
        header = [h.strip() for h in header]
        if len(set(header)) != len(header) or any(not h for h in header):
            raise InputError("header must contain distinct, non-empty column names")
        rows = []
        try:
            for i, rec in enumerate(reader, start=1):
                if not rec:
                    continue
                if len(rec) != len(header):
                    raise InputError(f"row {i}: expected {len(header)} cells, found {len(rec)}")
                vals = []
                for name, cell in zip(header, rec):
                    try:
                        v = float(cell)
                    except ValueError:
                        raise InputError(f"row {i}, column {name!r}: not a number: {cell!r}") from None
                    if not math.isfinite(v):
                        raise InputError(f"row {i}, column {name!r}: missing or non-finite value")
                    vals.append(v)
                rows.append(vals)
        except UnicodeDecodeError as exc:
            raise InputError(f"{path} is not UTF-8: {exc}") from exc
    if not rows:
        raise InputError(f"{path} has no data rows")
    return header, np.asarray(rows, dtype=float)


def _names(values) -> list[str]:
    out = []
    for v in values or []:
        out.extend(s.strip() for s in v.split(",") if s.strip())
    return out


def _columns(header, table, names) -> np.ndarray:
    idx = []
    for name in names:
        if name not in header:
            raise InputError(f"unknown column {name!r}; available: {', '.join(header)}")
        idx.append(header.index(name))
    return table[:, idx]


def _roles(args, header) -> tuple[str, list[str], list[str]]:
    if not args.y:
        raise InputError("--y is required")
    y = args.y
    x = _names(args.x)
    if not x:
        raise InputError("--x is required")
    w = _names(args.w) if args.w is not None else [h for h in header if h != y and h not in x]
    roles = [y] + x + w
    if len(set(roles)) != len(roles):
        raise InputError("column roles --y, --x and --w must be disjoint")
    return y, x, w


def _lambda(value: str):
    if value == "cv":
        return "cv"
    try:
        lam = float(value)
    except ValueError:
        raise InputError(f"--lambda must be a positive number or 'cv', got {value!r}") from None
    if not (lam > 0 and math.isfinite(lam)):
        raise InputError("--lambda must be positive")
    return lam


def _grid(value):
    if value is None:
        return None
    try:
        grid = tuple(float(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise InputError(f"--lambda-grid must be comma-separated numbers, got {value!r}") from None
    if not grid or any(not (g > 0) for g in grid):
        raise InputError("--lambda-grid entries must be positive")
    return grid


def _int_list(value, flag):
    try:
        return tuple(int(v) for v in value.split(",") if v.strip())
    except ValueError:
        raise InputError(f"{flag} must be comma-separated integers, got {value!r}") from None


def _threads(args) -> int:
    raw = args.threads if args.threads is not None else os.environ.get("BOUNDARY_INFER_THREADS")
    if raw is None:
        return 1
    try:
        t = int(raw)
    except (TypeError, ValueError):
        raise InputError(f"thread count must be an integer, got {raw!r}") from None
    if t < 1:
        raise InputError("thread count must be at least 1")
    return t


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _payload(result: dict, config: dict) -> dict:
    out = {"schema_version": SCHEMA_VERSION}
    out.update(result)
    out["config"] = config
    out["timestamp"] = _dt.datetime.now(_dt.timezone.utc).isoformat()
    return _jsonable(out)


def _write(payload: dict, path, fmt: str) -> None:
    if fmt == "json":
        text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
        if path is None:
            sys.stdout.write(text)
        else:
            Path(path).write_text(text, encoding="utf-8")
        return
    scalars = {}
    for k, v in payload.items():
        if isinstance(v, (int, float, str, bool)) or v is None:
            scalars[k] = v
        elif k == "ci":
            scalars["ci_lower"], scalars["ci_upper"] = v
    fh = sys.stdout if path is None else open(path, "w", newline="", encoding="utf-8")
    try:
        writer = csv.DictWriter(fh, fieldnames=list(scalars))
        writer.writeheader()
        writer.writerow(scalars)
    finally:
        if path is not None:
            fh.close()


def _kernel_config(args, points) -> KernelSpec:
    bw = args.bandwidth if args.bandwidth is not None else median_heuristic(points)
    try:
        return KernelSpec(bandwidth=float(bw), basis_size=args.basis_size)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def _regression(args, threads: int) -> tuple[dict, dict]:
    header, table = read_table(args.input)
    y, x, w = _roles(args, header)
    data = Dataset(_columns(header, table, w), _columns(header, table, x), _columns(header, table, [y]))
    spec = _kernel_config(args, data.points)
    try:
        cfg = InferenceConfig(
            lam=_lambda(args.lam), lambda_grid=_grid(args.lambda_grid), M=args.M,
            alpha=args.alpha, seed=args.seed, split=args.split, lambda_rule=args.lambda_rule,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    config = {
        "command": args.command, "input": str(args.input), "y": y, "x": x, "w": w,
        "bandwidth": spec.bandwidth, "basis_size": spec.basis_size, "norm": spec.norm,
        "lambda": cfg.lam, "lambda_grid": cfg.lambda_grid, "M": cfg.M, "alpha": cfg.alpha,
        "seed": cfg.seed, "folds": cfg.folds, "split": cfg.split, "lambda_rule": cfg.lambda_rule,
        "ridge_grid": list(cfg.ridge_grid), "threads": threads, "format": args.format,
    }
    with threadpool_limits(limits=threads):
        res = run_inference(data, spec, cfg)
    return res.to_dict(), config


def cmd_vimp(args, threads: int) -> int:
    result, config = _regression(args, threads)
    result["seed"] = config["seed"]
    _write(_payload(result, config), args.output, args.format)
    return EXIT_OK


def cmd_ci(args, threads: int) -> int:
    result, config = _regression(args, threads)
    keep = ("psi_hat", "ci", "pi_n", "p_value", "lambda_used", "n", "J")
    out = {k: result[k] for k in keep}
    out["level"] = 1.0 - config["alpha"]
    out["seed"] = config["seed"]
    _write(_payload(out, config), args.output, args.format)
    return EXIT_OK


def cmd_mi_test(args, threads: int) -> int:
    header, table = read_table(args.input)
    if len(header) < 2:
        raise InputError("mi-test needs two columns")
    if args.x is None and args.y is None:
        if len(header) != 2:
            raise InputError("give --x and --y when the file has more than two columns")
        xname, yname = header
    else:
        xs = _names(args.x)
        if len(xs) != 1 or not args.y:
            raise InputError("mi-test takes exactly one --x column and one --y column")
        xname, yname = xs[0], args.y
    if xname == yname:
        raise InputError("--x and --y must differ")
    sample = PairSample(_columns(header, table, [xname]), _columns(header, table, [yname]))
    spec = _kernel_config(args, sample.points)
    try:
        cfg = MiConfig(
            lam=_lambda(args.lam), lambda_grid=_grid(args.lambda_grid), sigma=args.sigma,
            M=args.M, alpha=args.alpha, seed=args.seed,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    config = {
        "command": args.command, "input": str(args.input), "x": xname, "y": yname,
        "bandwidth": spec.bandwidth, "basis_size": spec.basis_size, "norm": spec.norm,
        "lambda": cfg.lam, "lambda_grid": cfg.lambda_grid, "sigma": cfg.sigma, "M": cfg.M,
        "alpha": cfg.alpha, "seed": cfg.seed, "folds": cfg.folds, "threads": threads,
        "format": args.format,
    }
    with threadpool_limits(limits=threads):
        res = run_mi_test(sample, spec, cfg)
    out = res.to_dict()
    out["seed"] = cfg.seed
    _write(_payload(out, config), args.output, args.format)
    return EXIT_OK


def cmd_simulate(args, threads: int) -> int:
    if args.resume:
        raise InputError("resuming from partial output is not supported; rerun the study")
    if args.output is None:
        raise InputError("simulate needs --output DIR")
    methods = tuple(_names([args.methods])) if args.methods else METHODS
    try:
        cfg = SimConfig(
            n_grid=_int_list(args.n_grid, "--n-grid"), reps=args.reps,
            predictors=_int_list(args.predictors, "--predictors"), methods=methods,
            alpha_grid=(args.alpha,), ci_alpha=args.alpha, seed=args.seed, M=args.M,
            basis_size=args.basis_size, n_jobs=threads, lambda_rule=args.lambda_rule,
        )
    except ValueError as exc:
        raise InputError(str(exc)) from None
    out_dir = Path(args.output)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(f"cannot create {out_dir}: {exc}") from exc

    def progress(msg):
        print(f"[simulate] {msg}", file=sys.stderr, flush=True)

    with threadpool_limits(limits=1):
        report = run_study(cfg, progress=progress)
    report.to_csv(out_dir / "simulation.csv")
    payload = _payload(report.to_dict(), report.config)
    (out_dir / "simulation.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser, defaults_lambda: str = "cv") -> None:
    p.add_argument("--input", required=True, help="CSV file with a header row")
    p.add_argument("--output", help="output file (default: standard output)")
    p.add_argument("--y", help="response column")
    p.add_argument("--x", action="append", help="column(s) under test; repeat or comma-separate")
    p.add_argument("--w", action="append", help="adjustment columns (default: all others)")
    p.add_argument("--bandwidth", type=float, help="Gaussian length scale (default: median heuristic)")
    p.add_argument("--basis-size", type=int, default=20, help="number of basis functions J")
    p.add_argument("--lambda", dest="lam", default=defaults_lambda, help="number or 'cv'")
    p.add_argument("--lambda-grid", help="comma-separated candidates for --lambda cv")
    p.add_argument("--M", type=int, default=500, help="bootstrap replicates")
    p.add_argument("--alpha", type=float, default=0.05, help="test level / 1 - CI coverage")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, help="thread cap (env BOUNDARY_INFER_THREADS)")
    p.add_argument("--format", choices=("json", "csv"), default="json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="boundary-infer",
        description="Nonparametric improvement-in-fit tests and intervals.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (("vimp", "variable-importance test"),
                       ("ci", "confidence interval for the improvement in fit")):
        p = sub.add_parser(name, help=text)
        _add_common(p)
        p.add_argument("--split", action="store_true",
                       help="tune lambda on one half, estimate on the other")
        p.add_argument("--lambda-rule", choices=("gated", "min", "1se"), default="gated",
                       help="cross-validation selection rule")

    p = sub.add_parser("mi-test", help="independence test for two columns")
    _add_common(p)
    p.add_argument("--sigma", type=float, default=1.0, help="scale of the second-stage class")

    p = sub.add_parser("simulate", help="Monte Carlo study")
    p.add_argument("--output", help="output directory")
    p.add_argument("--reps", type=int, default=500)
    p.add_argument("--n-grid", default="100,200,400,800,1600")
    p.add_argument("--predictors", default="1,2,3")
    p.add_argument("--methods", help=f"comma-separated subset of {','.join(METHODS)}")
    p.add_argument("--basis-size", type=int, default=20)
    p.add_argument("--lambda-rule", choices=("gated", "min", "1se"), default="gated")
    p.add_argument("--M", type=int, default=500)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, help="worker processes (env BOUNDARY_INFER_THREADS)")
    p.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)
    return parser


_COMMANDS = {"vimp": cmd_vimp, "ci": cmd_ci, "mi-test": cmd_mi_test, "simulate": cmd_simulate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        threads = _threads(args)
        return _COMMANDS[args.command](args, threads)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (BoundaryInferError, np.linalg.LinAlgError, FloatingPointError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
