"""Command-line front end: ``sop fit-* DATA --out DIR`` and ``sop simulate``.

Exit codes: 0 converged, 2 fit finished without convergence (artifacts are
still written), 1 input or model error.  ``SOP_LOG=quiet|info|trace``
controls iteration logging.
"""

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import errors
from .builders import (adaptive_pspline_spec, factor_by_curve_spec, hierarchical_m0_spec,
                       lambda_field, predict_curve)
from .core import FitOptions, fit
from .io import build_report, ingest_csv, write_columns
from .model import ed_upper_bounds, make_family
from .simulate import simulate_doppler, simulate_hierarchical, simulate_poisson_peaks

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2

LOG_LEVELS = {"quiet": logging.ERROR, "info": logging.INFO, "trace": logging.DEBUG}

HINTS = (
    (errors.UnbalancedPanelError, "every subject must be observed on the same time grid"),
    (errors.ParseError, "check the CSV header and column flags (--x-col, --y-col, ...)"),
    (errors.SingularSystemError, "reduce --nseg/--psi-basis or check for collinear data"),
    (errors.DegenerateComponentError,
     "a variance component has no support in the data; simplify the model"),
    (errors.OverparameterizedError, "too many parameters for the data; reduce --nseg"),
    (errors.DegenerateMeanError, "fitted means reached the family boundary; check the response"),
    (errors.OutOfDomainError, "evaluation points must lie inside the data range"),
    (errors.SOPError, "see --help for valid options"),
)


class _Parser(argparse.ArgumentParser):
    # usage errors are input errors; exit status 2 is reserved for non-convergence
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _configure_logging():
    level = os.environ.get("SOP_LOG", "").strip().lower()
    logger = logging.getLogger("sop")
    logger.setLevel(LOG_LEVELS.get(level, logging.WARNING))
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("sop: %(message)s"))
        logger.addHandler(handler)


def _add_fit_options(p, hierarchical=False):
    p.add_argument("data", help="input CSV with a header row")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--degree", type=int, default=3, help="B-spline degree (default 3)")
    p.add_argument("--penalty-order", type=int, default=2, help="difference order (default 2)")
    p.add_argument("--family", choices=("gaussian", "poisson", "binomial"), default="gaussian")
    p.add_argument("--max-inner", type=int, default=200)
    p.add_argument("--max-outer", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-6, help="relative REML deviance tolerance")
    p.add_argument("--grid", type=int, default=200, help="points in curve.csv (default 200)")
    p.add_argument("--y-col", default="y")
    if hierarchical:
        p.add_argument("--x-col", default="t", help="time column (default t)")
        p.add_argument("--subject-col", default="subject")
        p.add_argument("--pop-basis", type=int, default=23, help="population B-splines")
        p.add_argument("--subj-basis", type=int, default=13, help="subject B-splines")
        p.add_argument("--subj-penalty-order", type=int, default=None,
                       help="subject difference order (default: --penalty-order)")
    else:
        p.add_argument("--x-col", default="x")
        p.add_argument("--trials-col", default=None, help="binomial trials column")
        p.add_argument("--nseg", type=int, default=40, help="B-spline segments (default 40)")


def build_parser():
    parser = _Parser(prog="sop", description="REML fits of P-spline mixed models by SOP.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("fit-pspline", help="P-spline with a single smoothing parameter")
    _add_fit_options(p)
    p = sub.add_parser("fit-adaptive", help="spatially adaptive P-spline")
    _add_fit_options(p)
    p.add_argument("--psi-basis", type=int, default=10,
                   help="B-splines for the smoothing-parameter curve (default 10)")
    p = sub.add_parser("fit-hierarchical", help="population curve plus subject curves")
    _add_fit_options(p, hierarchical=True)
    p = sub.add_parser("fit-factor", help="two group curves plus subject curves")
    _add_fit_options(p, hierarchical=True)
    p.add_argument("--group-col", default="group", help="0 = control, 1 = case")

    sim = sub.add_parser("simulate", help="write a seeded synthetic data set")
    sim_sub = sim.add_subparsers(dest="dataset", required=True, parser_class=_Parser)
    for name in ("doppler", "poisson-peaks", "hierarchical"):
        s = sim_sub.add_parser(name)
        s.add_argument("--seed", type=int, default=None, help="required")
        s.add_argument("--out", default=None, help="output CSV (default: stdout)")
        if name == "hierarchical":
            s.add_argument("--subjects", type=int, default=30)
            s.add_argument("--points", type=int, default=50)
            s.add_argument("--groups", action="store_true", help="add a 0/1 group column")
        else:
            s.add_argument("--n", type=int, default=1000 if name == "doppler" else 2000)
    return parser


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def _family(args):
    return make_family(args.family)


def _setup_curve(args):
    data = ingest_csv(args.data, x=args.x_col, y=args.y_col, trials=args.trials_col)
    p = args.psi_basis if args.command == "fit-adaptive" else 1
    spec, aux = adaptive_pspline_spec(data.x, data.y, family=_family(args), nseg=args.nseg,
                                      degree=args.degree, q=args.penalty_order, p=p,
                                      trials=data.trials)
    model = {"command": args.command, "nseg": args.nseg, "n_basis": aux.d, "psi_basis": p}
    grid = np.linspace(data.x.min(), data.x.max(), args.grid)
    return spec, aux, model, grid


def _setup_panel(args):
    group = args.group_col if args.command == "fit-factor" else None
    data = ingest_csv(args.data, x=args.x_col, y=args.y_col, subject=args.subject_col,
                      group=group)
    q_subj = args.subj_penalty_order or args.penalty_order
    kw = dict(family=_family(args), d=args.pop_basis, d_subj=args.subj_basis,
              q=args.penalty_order, q_subj=q_subj, degree=args.degree)
    if group:
        spec, aux = factor_by_curve_spec(data.t, data.Y, data.labels, **kw)
    else:
        spec, aux = hierarchical_m0_spec(data.t, data.Y, **kw)
    model = {"command": args.command, "pop_basis": args.pop_basis, "subj_basis": args.subj_basis,
             "subj_penalty_order": q_subj, "subjects": list(data.subjects),
             "time_points": int(data.t.size)}
    grid = np.linspace(data.t.min(), data.t.max(), args.grid)
    return spec, aux, model, grid


def _curve_columns(aux, result, grid, group=None):
    eta, se = predict_curve(aux, result, grid, group=group, scale="link")
    inv = result.family.linkinv
    lower, upper = eta - 2.0 * se, eta + 2.0 * se
    # the inverse links are increasing, so the band keeps its order
    return {"x": grid, "eta": eta, "se": se, "fitted": inv(eta), "se_lower": inv(lower),
            "se_upper": inv(upper)}


def cmd_fit(args):
    out = Path(args.out)
    t0 = time.perf_counter()
    if args.grid < 2:
        raise errors.InvalidArgumentError("--grid must be at least 2")
    if args.command in ("fit-pspline", "fit-adaptive"):
        spec, aux, model, grid = _setup_curve(args)
    else:
        spec, aux, model, grid = _setup_panel(args)
    model.update({"data": str(args.data), "family": spec.family.kind, "link": spec.family.link,
                  "degree": args.degree, "penalty_order": args.penalty_order, "n": spec.n,
                  "fixed_effects": spec.r, "random_effects": spec.n_random})
    t1 = time.perf_counter()
    options = FitOptions(max_inner=args.max_inner, max_outer=args.max_outer, tol=args.tol,
                         outer_tol=args.tol)
    result = fit(spec, options)
    t2 = time.perf_counter()

    out.mkdir(parents=True, exist_ok=True)
    bounds = ed_upper_bounds(spec, result.state)
    if args.command == "fit-factor":
        cols = [_curve_columns(aux, result, grid, group=g) for g in (0, 1)]
        curve = {k: np.concatenate([c[k] for c in cols]) for k in cols[0]}
        curve = {"group": np.repeat([0, 1], grid.size), **curve}
    else:
        curve = _curve_columns(aux, result, grid)
    write_columns(out / "curve.csv", curve)
    if args.command == "fit-adaptive":
        write_columns(out / "lambda.csv", {"position": aux.difference_positions(),
                                           "lambda": lambda_field(aux, result.state)})
    t3 = time.perf_counter()
    timing = {"build_seconds": t1 - t0, "fit_seconds": t2 - t1, "export_seconds": t3 - t2}
    report = build_report(spec, result, model, ed_bounds=bounds, timing=timing)
    (out / "report.json").write_text(report.to_json(), encoding="utf-8")
    if not result.converged:
        print(f"sop: fit did not converge; diagnostics written to {out} "
              "(raise --max-inner/--max-outer or loosen --tol)", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    if args.seed is None:
        raise errors.InvalidArgumentError("--seed is required so that simulations are reproducible")
    if args.dataset == "doppler":
        x, y = simulate_doppler(args.seed, n=args.n)
        cols = {"x": x, "y": y}
    elif args.dataset == "poisson-peaks":
        x, y, _ = simulate_poisson_peaks(args.seed, n=args.n)
        cols = {"x": x, "y": y.astype(int)}
    else:
        t, Y, labels = simulate_hierarchical(args.seed, subjects=args.subjects,
                                             points=args.points, groups=args.groups)
        s, m = Y.shape
        cols = {"subject": np.repeat([f"s{j + 1:03d}" for j in range(m)], s),
                "t": np.tile(t, m), "y": Y.T.ravel()}
        if labels is not None:
            cols["group"] = np.repeat(labels, s)
    write_columns(sys.stdout if args.out is None else args.out, cols)
    return EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging()
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        return cmd_fit(args)
    except errors.SOPError as exc:
        hint = next(h for cls, h in HINTS if isinstance(exc, cls))
        print(f"sop: error: {exc}\nhint: {hint}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"sop: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
