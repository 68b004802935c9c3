"""Command-line interface.

JSON goes to stdout and diagnostics to stderr. Domain errors exit with
status 1 and a single ``ERROR <code>: <detail>`` line; usage errors exit 2.
"""

from __future__ import annotations

import argparse
import io
import json
import logging
import sys

import numpy as np

from . import baselines, classes, estimators, sim, specfun
from .errors import AssureError, ConfigError
from .jsonio import dumps
from .model import load_dataset
# the package namespace re-exports the optimize() function, so import names directly
from .optimize import DEFAULT_GRID, implied_cost, implied_cost_sweep, multistart_argmax, optimize, welfare_curve


def _read_json(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None


def _parse_floats(text: str, what: str) -> list[float]:
    try:
        vals = [float(v) for v in text.replace(";", ",").split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"{what} must be a comma-separated list of numbers, got {text!r}") from None
    if not vals:
        raise ConfigError(f"{what} is empty")
    return vals


def _load(args):
    try:
        data = load_dataset(args.data, mode=args.mode)
    except OSError as exc:
        raise ConfigError(f"{args.data}: {exc.strerror}") from None
    cfg = _read_json(args.family) if args.family else {"kind": "threshold"}
    return data, classes.family_from_config(cfg, data)


def _method(args, data):
    if args.method:
        return args.method
    return "poisson" if data.mode == "poisson" else "assure"


def _emit(obj, out):
    out.write(dumps(obj) + "\n")


def cmd_estimate(args, out):
    data, family = _load(args)
    beta = _parse_floats(args.beta, "--beta")
    est = estimators.estimate(data, family, beta, _method(args, data), args.h, args.eps)
    _emit(est.to_dict(), out)


def _optimize(args, data, family, method):
    if args.starts is not None:
        return multistart_argmax(data, family, method, args.starts, args.seed, args.h, args.eps)
    return optimize(data, family, method, grid_size=args.grid, seed=args.seed, h=args.h, eps=args.eps, refine=args.refine)


def cmd_optimize(args, out):
    data, family = _load(args)
    method = _method(args, data)
    res = _optimize(args, data, family, method)
    decisions = classes.decisions(family, data, res.beta_hat)
    payload = {**res.to_dict(), "family": family.to_config(), "n": data.n, "seed": args.seed}
    fit = baselines.plugin_point(family, data) if family.differentiable else None
    if fit is not None:
        payload["plugin"] = fit.to_config(family)
    _emit(payload, out)
    if args.decisions:
        with open(args.decisions, "w", encoding="utf-8") as fh:
            fh.write("decision\n" + "".join(f"{d}\n" for d in decisions))


def cmd_curve(args, out):
    data, family = _load(args)
    fixed = _parse_floats(args.fixed, "--fixed") if args.fixed else None
    curve = welfare_curve(data, family, _method(args, data), args.coordinate, args.grid, fixed, args.h, args.eps)
    buf = io.StringIO()
    curve.write_csv(buf)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(buf.getvalue())
    else:
        out.write(buf.getvalue())
    _emit(curve.to_dict(), out if args.out else sys.stderr)


def cmd_sweep_costs(args, out):
    data, family = _load(args)
    costs = _parse_floats(args.costs, "--costs")
    method = _method(args, data)
    opt = {"grid_size": args.grid, "seed": args.seed, "h": args.h, "eps": args.eps, "refine": args.refine}
    if args.starts is not None:
        opt["starts"] = args.starts
    sweep = implied_cost_sweep(data, family, method, costs, **opt)
    payload = {
        "family": family.to_config(),
        "method": method,
        "rows": [{"cost": k, **r.to_dict()} for k, r in sweep],
    }
    if args.target is not None:
        payload["target"] = args.target
        payload["implied_cost"] = implied_cost(sweep, args.target)
    _emit(payload, out)


def cmd_simulate(args, out):
    with open(args.scenario, encoding="utf-8") as fh:
        text = fh.read()
    cfg = json.loads(text) if text.strip() else {}
    methods = cfg.pop("methods", None)
    if args.methods:
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    if not methods:
        raise ConfigError("no methods: give --methods or a 'methods' list in the scenario")
    if args.seed is not None:
        cfg["seed"] = args.seed
    spec = sim.ScenarioSpec.from_dict(cfg)
    report = sim.run_scenario(spec, methods, args.threads)
    text = report.to_json() + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        out.write(text)
    if args.csv:
        with open(args.csv, "w", encoding="utf-8") as fh:
            report.write_csv(fh)


def self_check() -> dict:
    """Bias envelope and special-function identities; used by ``check``."""
    checks = {}
    bias = sim.bias_envelope_check([1.0, 0.5, 0.25], [-2, -1, -0.3, 0, 0.3, 1, 2], [-1, 0, 1], [0.5, 1, 2])
    checks["bias_envelope"] = bias.passed
    x = np.linspace(-50, 50, 2001)
    checks["csinc_symmetry"] = bool(np.max(np.abs(specfun.cumulative_sinc(x) + specfun.cumulative_sinc(-x) - 1.0)) <= 1e-14)
    checks["si_limits"] = abs(specfun.sine_integral(1e6) - np.pi / 2) < 1e-6 and specfun.sine_integral(0.0) == 0.0
    # Si(1) from its Maclaurin series, summed independently in exact rationals
    from fractions import Fraction
    from math import factorial

    si1 = float(sum(Fraction((-1) ** k, (2 * k + 1) * factorial(2 * k + 1)) for k in range(12)))
    checks["si_value"] = abs(specfun.sine_integral(1.0) - si1) < 1e-15
    checks["sinc_derivatives"] = (
        abs(specfun.sinc(0.0) - 1 / np.pi) < 1e-16 and abs(specfun.sinc_double_prime(0.0) + 1 / (3 * np.pi)) < 1e-16
    )
    return checks


def cmd_check(args, out):
    checks = self_check()
    ok = all(checks.values())
    _emit({"passed": ok, "checks": checks}, out)
    return 0 if ok else 1


def _common(p, with_family=True):
    p.add_argument("--data", required=True, help="dataset CSV with columns y, sigma, k[, x1..xp]")
    if with_family:
        p.add_argument("--family", help="family config JSON (default: threshold)")
    p.add_argument("--mode", choices=("gaussian", "poisson"), default="gaussian")
    p.add_argument("--method", choices=estimators.METHODS)
    p.add_argument("--h", type=float, help="ASSURE bandwidth (default 1/sqrt(2 log n))")
    p.add_argument("--eps", type=float, help="coupled-bootstrap noise scale (default n^-1/5)")


def _search(p):
    p.add_argument("--grid", type=int, default=DEFAULT_GRID, help="grid points per coordinate")
    p.add_argument("--starts", type=int, help="use multistart Nelder-Mead with this many starts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--refine", action="store_true", help="polish the grid maximizer with Nelder-Mead")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="assure", description="Welfare estimation and threshold selection for compound decisions.")
    parser.add_argument("--threads", type=int, help="worker processes (default: $ASSURE_THREADS or 1)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="estimated welfare at one parameter point")
    _common(p)
    p.add_argument("--beta", required=True, help="comma-separated parameter point")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("optimize", help="maximize the estimated welfare over the family's box")
    _common(p)
    _search(p)
    p.add_argument("--decisions", help="write the 0/1 decision column here as CSV")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("curve", help="welfare curve along one coordinate")
    _common(p)
    p.add_argument("--coordinate", type=int, default=0)
    p.add_argument("--grid", type=int, default=DEFAULT_GRID)
    p.add_argument("--fixed", help="values of the other coordinates (default: plug-in fit)")
    p.add_argument("--out", help="curve CSV path; the JSON mirror goes to stdout")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("sweep-costs", help="re-optimize for each constant cost")
    _common(p)
    _search(p)
    p.add_argument("--costs", required=True, help="comma-separated costs")
    p.add_argument("--target", type=float, help="report the cost whose chosen beta crosses this value")
    p.set_defaults(func=cmd_sweep_costs)

    p = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    p.add_argument("--scenario", required=True, help="ScenarioSpec JSON (may include a 'methods' list)")
    p.add_argument("--methods", help="comma-separated method ids, e.g. assure:linear_shrink,plugin:linear_shrink")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="report JSON path (default stdout)")
    p.add_argument("--csv", help="per-rep rows as CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check", help="bias-envelope and special-function self-tests")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = sim.resolve_threads(args.threads)
        code = args.func(args, out)
    except AssureError as exc:
        print(f"ERROR {exc.code}: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"ERROR io: {exc}".replace("\n", " "), file=sys.stderr)
        return 1
    return 0 if code is None else code


if __name__ == "__main__":
    sys.exit(main())
