"""``mvdual`` command line: solve, frontier, feasibility and verify.

Exit codes
----------
0  success
1  malformed config or arguments (``verify``: a check failed)
2  degenerate instance (constant wealth is admissible, variance 0)
3  solver non-convergence (``frontier``: every row failed)
4  feasibility analysis failed
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from pathlib import Path

import numpy as np

from . import _parallel
from .config import RunConfig, load_config
from .dual import FeasibilityResult, ProblemSpec, frontier, min_investment, solve_multipliers
from .errors import BracketError, ConfigError, InfeasibilityAnalysisError, MvdualError, PicardDivergenceError
from .fbsde import CoupledWorkspace

EXIT_OK, EXIT_CONFIG, EXIT_DEGENERATE, EXIT_NONCONVERGED, EXIT_INFEASIBLE = 0, 1, 2, 3, 4


def _finite(obj):
    """Replace non-finite floats by ``None`` so the output is strict JSON."""
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dump_json(doc: dict, fmt: str = "json") -> str:
    doc = _finite(doc)
    if fmt == "json-compact":
        return json.dumps(doc, separators=(",", ":"), allow_nan=False) + "\n"
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def _err(msg: str) -> None:
    print(f"mvdual: {msg}", file=sys.stderr)


def _load(args) -> tuple[RunConfig, ProblemSpec]:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"numerics.seed={args.seed}")
    cfg = load_config(args.config, overrides)
    return cfg, cfg.problem_spec()


def _feasibility_dict(res: FeasibilityResult, y: float) -> dict:
    return {
        "x_bar": res.x_bar,
        "lambda_star": res.lambda_star,
        "upper_bound": res.upper_bound,
        "kappa": res.kappa,
        "x_bar_le_y": res.x_bar <= y,
        "x_bar_lt_y": res.x_bar < y,
    }


def _feasibility_warning(res: FeasibilityResult, y: float) -> str | None:
    if res.x_bar < y:
        return None
    if res.upper_bound:
        return f"feasibility not established: upper bound x_bar={res.x_bar!r} >= y={y!r}"
    return f"infeasible: minimal investment x_bar={res.x_bar!r} >= y={y!r}"


# --- commands ---------------------------------------------------------------


def cmd_solve(args) -> int:
    try:
        cfg, spec = _load(args)
    except ConfigError as err:
        _err(str(err))
        return EXIT_CONFIG
    t0 = time.perf_counter()
    paths = spec.make_paths()
    t_paths = time.perf_counter() - t0
    ws = CoupledWorkspace()

    warnings: list[str] = []
    feas = None
    try:
        res = min_investment(spec, paths, workspace=ws)
        feas = _feasibility_dict(res, spec.y)
        w = _feasibility_warning(res, spec.y)
        if w:
            warnings.append(w)
    except InfeasibilityAnalysisError as err:
        warnings.append(f"feasibility analysis failed: {err}")
    for w in warnings:
        _err(f"warning: {w}")

    status, error, report = "converged", None, None
    try:
        _, rep = solve_multipliers(spec, paths, ws)
        report = rep
        code = EXIT_DEGENERATE if rep.degenerate else EXIT_OK
        status = "degenerate" if rep.degenerate else "converged"
    except PicardDivergenceError as err:
        report, code, status, error = err.report, EXIT_NONCONVERGED, "not_converged", str(err)
    except (BracketError, MvdualError) as err:
        code, status, error = EXIT_NONCONVERGED, "failed", f"{type(err).__name__}: {err}"
    t_total = time.perf_counter() - t0

    if report is not None:
        report.warnings[:0] = warnings
    doc = {
        "status": status,
        "error": error,
        "report": report.to_dict() if report is not None else None,
        "feasibility": feas,
        "config": cfg.to_dict(),
    }
    if not args.no_timing:
        doc["timing"] = {"paths_seconds": t_paths, "total_seconds": t_total, "threads": _parallel.get_threads()}
    out = Path(args.out or cfg.output.report)
    out.write_text(dump_json(doc, cfg.output.format))

    if report is not None:
        lam = report.multipliers
        lam_txt = "none" if lam is None else f"lambda1={lam.lambda1!r} lambda2={lam.lambda2!r}"
        print(f"status={status} variance={report.variance!r} X0={report.X0!r} {lam_txt}")
    else:
        print(f"status={status}")
    if error:
        _err(error)
    return code


def frontier_targets(c_min: float, c_max: float, c_count: int) -> list[float]:
    if not (0 < c_min <= c_max) or c_count < 1:
        raise ConfigError("frontier needs 0 < c-min <= c-max and c-count >= 1")
    if c_count == 1:
        return [float(c_min)]
    return [float(c) for c in np.linspace(c_min, c_max, c_count)]


def _csv_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(float(v))


def cmd_frontier(args) -> int:
    try:
        cfg, spec = _load(args)
        targets = frontier_targets(args.c_min, args.c_max, args.c_count)
    except ConfigError as err:
        _err(str(err))
        return EXIT_CONFIG
    rows = frontier(spec, targets)
    out = Path(args.out or cfg.output.frontier)
    with out.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["c", "variance", "lambda1", "lambda2", "degenerate", "converged"])
        for r in rows:
            w.writerow([_csv_value(x) for x in (r.c, r.variance, r.lambda1, r.lambda2, r.degenerate, r.converged)])
            if r.error:
                _err(f"c={r.c!r}: {r.error}")
    failed = sum(not r.converged for r in rows)
    print(f"rows={len(rows)} failed={failed} out={out}")
    return EXIT_NONCONVERGED if failed == len(rows) else EXIT_OK


def cmd_feasibility(args) -> int:
    try:
        _, spec = _load(args)
    except ConfigError as err:
        _err(str(err))
        return EXIT_CONFIG
    try:
        res = min_investment(spec)
    except InfeasibilityAnalysisError as err:
        _err(str(err))
        return EXIT_INFEASIBLE
    info = _feasibility_dict(res, spec.y)
    for key in ("x_bar", "lambda_star", "upper_bound", "kappa", "x_bar_le_y", "x_bar_lt_y"):
        v = info[key]
        txt = "none" if v is None else ("true" if v is True else "false" if v is False else repr(v))
        print(f"{key}={txt}")
    print(f"y={spec.y!r}")
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import run_suites

    resolution = {}
    if args.n_paths is not None:
        resolution["n_paths"] = args.n_paths
    if args.n_steps is not None:
        resolution["n_steps"] = args.n_steps
    if args.seed is not None:
        resolution["seed"] = args.seed
    checks = run_suites(args.suite, **resolution)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_OK if failed == 0 else 1


# --- parser -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage errors share exit code 1 with config errors; 2 means degenerate
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mvdual", description="Mean-variance portfolio selection with nonlinear wealth dynamics.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        if config:
            p.add_argument("--config", required=True, help="JSON run configuration")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted override, repeatable")
        p.add_argument("--seed", type=int, help="override numerics.seed")
        p.add_argument("--threads", type=int, default=1, help="worker threads (output does not depend on it)")

    p = sub.add_parser("solve", help="solve one mean-variance problem")
    common(p)
    p.add_argument("--out", help="report path (default output.report)")
    p.add_argument("--no-timing", action="store_true", help="omit the timing block from the report")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("frontier", help="sweep the target mean c")
    common(p)
    p.add_argument("--c-min", type=float, required=True)
    p.add_argument("--c-max", type=float, required=True)
    p.add_argument("--c-count", type=int, required=True)
    p.add_argument("--out", help="CSV path (default output.frontier)")
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser("feasibility", help="minimal admissible initial investment")
    common(p)
    p.set_defaults(func=cmd_feasibility)

    p = sub.add_parser("verify", help="run self-check suites")
    common(p, config=False)
    p.add_argument("--suite", default="all", choices=["all", "oracle", "duality", "kkt", "comparison", "variational"])
    p.add_argument("--n-paths", type=int, help="paths for simulating suites")
    p.add_argument("--n-steps", type=int, help="time steps for simulating suites")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads < 1:
        _err("--threads must be >= 1")
        return EXIT_CONFIG
    _parallel.set_threads(args.threads)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
