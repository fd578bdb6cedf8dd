"""Command-line interface: ``estimate``, ``simulate``, and ``diagnose``.

Every run writes a JSON document that embeds the fully resolved
configuration, the seed, and the package version, so results can be
replayed exactly.  Exit codes: 0 success, 1 runtime error, 2 the fit did
not converge, 64 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import load_csv
from .diagnostics import diagnose
from .estimators import Estimate, GseConfig, em_mle, emve_init, gse_fit
from .exceptions import CellguardError
from .gyfilter import FilterConfig, apply_filter
from .simulation import SimConfig, run_simulation

USAGE_EXIT = 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def _resolve_threads(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("CELLGUARD_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise CellguardError(f"CELLGUARD_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def _write_output(text: str, path: str | None) -> None:
    if path is None or path == "-":
        sys.stdout.write(text if text.endswith("\n") else text + "\n")
    else:
        Path(path).write_text(text if text.endswith("\n") else text + "\n")


def _parse_k_grid(text: str) -> tuple:
    try:
        lo, hi, step = (float(tok) for tok in text.split(":"))
    except ValueError:
        raise ValueError(f"k grid must look like LO:HI:STEP, got {text!r}") from None
    if step <= 0.0 or hi < lo:
        raise ValueError(f"k grid must have positive step and HI >= LO, got {text!r}")
    return tuple(np.arange(lo, hi + 1e-9, step))


def build_parser() -> _Parser:
    parser = _Parser(prog="cellguard", description=__doc__)
    parser.add_argument("--version", action="version", version=f"cellguard {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    est = sub.add_parser("estimate", help="fit location/scatter to a CSV file")
    est.add_argument("--input", required=True, help="CSV file to read")
    est.add_argument("--na", default="NA", help="missing-value token (default NA)")
    est.add_argument("--header", action="store_true", help="skip a header row")
    est.add_argument("--alpha", type=float, default=0.95, help="filter tail level")
    est.add_argument("--no-filter", action="store_true", help="skip the outlier filter")
    est.add_argument("--method", choices=("tsgs", "mle"), default="tsgs")
    est.add_argument("--seed", type=int, default=0)
    est.add_argument("--output", help="output JSON path (default stdout)")

    sim = sub.add_parser("simulate", help="run the Monte Carlo study")
    sim.add_argument("--p", type=int, required=True)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--model", choices=("clean", "icm", "thcm"), default="clean")
    sim.add_argument("--eps", default="0.1", help="comma-separated contamination fractions")
    sim.add_argument("--k-grid", default="1:100:5", help="magnitude grid LO:HI:STEP")
    sim.add_argument("--replicates", type=int, default=100)
    sim.add_argument("--cn", type=float, default=100.0)
    sim.add_argument("--estimators", default="tsgs,mle", help="comma-separated subset of tsgs,mle")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--threads", type=int, default=None)
    sim.add_argument("--time", action="store_true", help="record wall-clock time per fit")
    sim.add_argument("--output", help="output JSON path; CSV goes next to it")

    dia = sub.add_parser("diagnose", help="flag outlying cells, pairs, and cases")
    dia.add_argument("--input", required=True, help="CSV file to read (complete data)")
    dia.add_argument("--na", default="NA", help="missing-value token (default NA)")
    dia.add_argument("--header", action="store_true", help="skip a header row")
    group = dia.add_mutually_exclusive_group(required=True)
    group.add_argument("--estimate", help="JSON file with a previously fitted estimate")
    group.add_argument("--fit", choices=("tsgs", "mle"), help="fit this estimator inline")
    dia.add_argument("--conf", type=float, default=0.99)
    dia.add_argument("--seed", type=int, default=0)
    dia.add_argument("--flagged-csv", help="also write flagged cells to this CSV file")
    dia.add_argument("--output", help="output JSON path (default stdout)")
    return parser


def _cmd_estimate(args) -> int:
    X = load_csv(args.input, na_token=args.na, header=args.header)
    config = {
        "input": args.input,
        "na": args.na,
        "header": bool(args.header),
        "alpha": args.alpha,
        "no_filter": bool(args.no_filter),
        "method": args.method,
        "seed": args.seed,
    }
    filter_result = None
    data = X
    if not args.no_filter:
        data, filter_result = apply_filter(X, FilterConfig(alpha=args.alpha))
    q_n = filter_result.q_n if filter_result is not None else data.observed_fraction_of_full_rows()

    if args.method == "mle":
        est = em_mle(data)
    else:
        gse_cfg = GseConfig(seed=args.seed)
        omega = emve_init(data, gse_cfg)
        est = gse_fit(data, omega, gse_cfg)
        label = "tsgs" if filter_result is not None else "gse"
        est = Estimate(label, est.mu, est.sigma, est.scale, est.iterations, est.converged)

    payload = {
        "version": __version__,
        "seed": args.seed,
        "config": config,
        "method": est.method,
        "mu": est.mu.tolist(),
        "sigma": est.sigma.tolist(),
        "scale": est.scale,
        "iterations": est.iterations,
        "converged": est.converged,
        "q_n": q_n,
        "filter": json.loads(filter_result.to_json()) if filter_result is not None else None,
    }
    _write_output(json.dumps(payload, sort_keys=True, indent=1), args.output)
    return 0 if est.converged else 2


def _cmd_simulate(args) -> int:
    try:
        k_grid = _parse_k_grid(args.k_grid)
        eps = tuple(float(tok) for tok in args.eps.split(","))
        estimators = tuple(tok.strip() for tok in args.estimators.split(",") if tok.strip())
        cfg = SimConfig(
            p=args.p,
            n=args.n,
            models=(args.model,),
            eps=eps,
            k_grid=k_grid,
            replicates=args.replicates,
            cn=args.cn,
            estimators=estimators,
            seed=args.seed,
            threads=_resolve_threads(args.threads),
            time_fits=bool(args.time),
        )
    except ValueError as exc:
        print(f"cellguard simulate: error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    report = run_simulation(cfg)
    _write_output(report.to_json(), args.output)
    if args.output and args.output != "-":
        csv_path = Path(args.output).with_suffix(".csv")
        csv_path.write_text(report.to_csv())
    return 0


def _cmd_diagnose(args) -> int:
    X = load_csv(args.input, na_token=args.na, header=args.header)
    config = {
        "input": args.input,
        "na": args.na,
        "header": bool(args.header),
        "estimate": args.estimate,
        "fit": args.fit,
        "conf": args.conf,
        "seed": args.seed,
    }
    if args.estimate is not None:
        est = Estimate.from_json(Path(args.estimate).read_text())
    elif args.fit == "mle":
        est = em_mle(X)
    else:
        gse_cfg = GseConfig(seed=args.seed)
        data, _ = apply_filter(X)
        omega = emve_init(data, gse_cfg)
        fitted = gse_fit(data, omega, gse_cfg)
        est = Estimate("tsgs", fitted.mu, fitted.sigma, fitted.scale,
                       fitted.iterations, fitted.converged)
    report = diagnose(X, est, conf=args.conf)
    payload = json.loads(report.to_json())
    payload["version"] = __version__
    payload["seed"] = args.seed
    payload["config"] = config
    _write_output(json.dumps(payload, sort_keys=True, indent=1), args.output)
    if args.flagged_csv:
        Path(args.flagged_csv).write_text(report.flagged_cells_csv())
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "estimate":
            return _cmd_estimate(args)
        if args.command == "simulate":
            return _cmd_simulate(args)
        return _cmd_diagnose(args)
    except (CellguardError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        print(f"cellguard {args.command}: error: {exc}", file=sys.stderr)
        return 1


def run() -> None:
    sys.exit(main())
