"""Command-line entry point: rcbf {solve-field, run, compare, adapt-demo, metrics}."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .adaptation import AdaptationConfig, SafePipeline, gamma_mesh, inflation_objective, sample_perturbations
from .barrier import HeadingUndefinedError
from .metrics import DEFAULT_EPS_X, compare, format_report, report
from .poisson import OutOfFieldError, PoissonConvergenceError, load_field, save_field, solve_poisson
from .sim import VARIANTS, TrajectoryLog, run_simulation
from .world import DegenerateMeshError, Scenario, ScenarioError, format_scenario, load_scenario, rasterize_domain

WORKERS_ENV = "RCBF_WORKERS"

log = logging.getLogger("robust_cbf")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _triple(text: str):
    try:
        vals = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    if len(vals) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated numbers, got {text!r}")
    return vals


def _resolve_scenario(args) -> Scenario:
    s = load_scenario(args.scenario)
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "error_box", None) is not None:
        changes["error_box"] = args.error_box
    if getattr(args, "paper_exact", False):
        changes["gamma_spacing"] = "linear"
    if getattr(args, "full_mesh", False):
        changes["coarse_first"] = False
    return s.with_(**changes) if changes else s


def _field_for(s: Scenario, path=None):
    if path:
        return load_field(path)
    return solve_poisson(rasterize_domain(s))


def _manifest(path: Path, command: str, s: Scenario, **extra):
    data = {"tool": "robust_cbf", "version": __version__, "command": command,
            "seed": s.seed, "scenario": format_scenario(s)}
    data.update(extra)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    return max(1, n)


def cmd_solve_field(args) -> int:
    s = _resolve_scenario(args)
    mask = rasterize_domain(s, resolution=args.resolution)
    t0 = time.perf_counter()
    f = solve_poisson(mask, tol=args.tol)
    elapsed = time.perf_counter() - t0
    save_field(f, args.out)
    print(f"grid {f.nx}x{f.ny} spacing {f.spacing:g} m")
    print(f"residual {f.residual:.3e} after {f.iterations} iterations ({elapsed:.2f} s)")
    print(f"wrote {args.out}")
    return 0


def cmd_run(args) -> int:
    s = _resolve_scenario(args)
    field = _field_for(s, args.field)
    result = run_simulation(s, args.variant, field)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    result.to_csv(out, timing=args.timing)
    rep = report(result, s, name=args.variant, epsilon_x=args.eps_x)
    _manifest(out.parent / "manifest.json", "run", s, variant=args.variant, log=out.name,
              status=result.status, deadlocked=rep.deadlocked, eps_x=args.eps_x)
    if result.status != "completed":
        print(f"warning: run stopped early ({result.status}) at t = {result['t'][-1]:.2f} s",
              file=sys.stderr)
    sys.stdout.write(format_report(rep))
    return 0


def _run_variant(job):
    s, variant, field = job
    return variant, run_simulation(s, variant, field)


def cmd_compare(args) -> int:
    s = _resolve_scenario(args)
    field = _field_for(s, args.field)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise UsageError(f"unknown variant(s): {', '.join(bad)}")
    jobs = [(s, v, field) for v in variants]
    n = min(_workers(), len(jobs))
    if n > 1:
        with ProcessPoolExecutor(max_workers=n) as ex:
            results = dict(ex.map(_run_variant, jobs))
    else:
        results = dict(map(_run_variant, jobs))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    reports = []
    for v in variants:
        results[v].to_csv(out / f"{v}.csv")
        reports.append(report(results[v], s, name=v, epsilon_x=args.eps_x))
    table = compare(reports)
    (out / "metrics.csv").write_text(table)
    _manifest(out / "manifest.json", "compare", s, variants=variants, eps_x=args.eps_x,
              field_residual=field.residual, field_iterations=field.iterations)
    sys.stdout.write(table)
    return 0


def cmd_adapt_demo(args) -> int:
    s = _resolve_scenario(args)
    field = _field_for(s, args.field)
    cfg = AdaptationConfig.from_scenario(s)
    rng = np.random.default_rng(s.seed)
    x_hat = np.asarray(args.state, dtype=float)
    samples = sample_perturbations(x_hat, s.error_box, cfg.n_samples, rng)
    pipe = SafePipeline(args.t, np.vstack([x_hat[None], samples]), field, s, x_hat[2])
    a1 = gamma_mesh(cfg.gamma_lo, cfg.gamma_hi, cfg.n1, cfg.spacing)
    a2 = gamma_mesh(cfg.gamma_lo, cfg.gamma_hi, cfg.n2, cfg.spacing)
    G1, G2 = (m.ravel() for m in np.meshgrid(a1, a2, indexing="ij"))
    sig = pipe.sigma(G1, G2)
    obj = inflation_objective(sig, G1, G2)
    best = np.lexsort((G2, G1, obj))[0]
    lines = ["gamma1,gamma2,sigma_hat,objective"]
    lines += [f"{a:.17g},{b:.17g},{c:.17g},{d:.17g}" for a, b, c, d in zip(G1, G2, sig, obj)]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"argmin gamma1={G1[best]:.6g} gamma2={G2[best]:.6g} sigma_hat={sig[best]:.6g} "
          f"objective={obj[best]:.6g} ({G1.size} candidates, {pipe.skipped} samples skipped)",
          file=sys.stderr)
    return 0


def cmd_metrics(args) -> int:
    s = load_scenario(args.scenario)
    lg = TrajectoryLog.from_csv(args.log)
    rep = report(lg, s, name=Path(args.log).stem, optimal=args.optimal, epsilon_x=args.eps_x)
    sys.stdout.write(compare([rep]) if args.csv else format_report(rep))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rcbf", description="Robust CBF safety filter with Poisson safety fields.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed=True):
        sp.add_argument("--scenario", default="paper", help="scenario file or preset name")
        if seed:
            sp.add_argument("--seed", type=int, help="override the scenario seed")
        sp.add_argument("--field", help="precomputed .psf field (otherwise solved)")

    sp = sub.add_parser("solve-field", help="solve the Poisson safety field")
    sp.add_argument("--scenario", default="paper")
    sp.add_argument("--out", required=True)
    sp.add_argument("--resolution", type=float)
    sp.add_argument("--tol", type=float, default=1e-6)
    sp.set_defaults(func=cmd_solve_field)

    sp = sub.add_parser("run", help="simulate one controller variant")
    common(sp)
    sp.add_argument("--variant", required=True, choices=VARIANTS)
    sp.add_argument("--out", required=True)
    sp.add_argument("--error-box", type=_triple, help="half-widths dx,dy,dtheta")
    sp.add_argument("--paper-exact", action="store_true", help="linear gamma mesh")
    sp.add_argument("--full-mesh", action="store_true", help="search the full gamma mesh each step")
    sp.add_argument("--timing", action="store_true", help="add per-step wall-clock column")
    sp.add_argument("--eps-x", type=float, default=DEFAULT_EPS_X)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("compare", help="run all variants and tabulate metrics")
    common(sp)
    sp.add_argument("--out-dir", default="compare_out")
    sp.add_argument("--variants", help="comma-separated subset")
    sp.add_argument("--error-box", type=_triple)
    sp.add_argument("--paper-exact", action="store_true")
    sp.add_argument("--eps-x", type=float, default=DEFAULT_EPS_X)
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("adapt-demo", help="objective landscape over the gamma mesh at one state")
    common(sp)
    sp.add_argument("--state", type=_triple, required=True, help="x,y,theta")
    sp.add_argument("--t", type=float, default=0.0)
    sp.add_argument("--error-box", type=_triple)
    sp.add_argument("--paper-exact", action="store_true")
    sp.add_argument("--out", help="write CSV here instead of stdout")
    sp.set_defaults(func=cmd_adapt_demo)

    sp = sub.add_parser("metrics", help="metrics of a logged run")
    sp.add_argument("--log", required=True)
    sp.add_argument("--scenario", default="paper")
    sp.add_argument("--optimal", help="optimal trajectory CSV (t,x,y,theta,v,omega)")
    sp.add_argument("--eps-x", type=float, default=DEFAULT_EPS_X)
    sp.add_argument("--csv", action="store_true", help="print as a CSV row")
    sp.set_defaults(func=cmd_metrics)
    return p


NUMERICAL_ERRORS = (PoissonConvergenceError, DegenerateMeshError, OutOfFieldError,
                    HeadingUndefinedError, FloatingPointError, np.linalg.LinAlgError)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NUMERICAL_ERRORS as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 2
    except (UsageError, ScenarioError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
