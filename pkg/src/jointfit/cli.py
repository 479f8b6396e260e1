"""Command-line entry point: ``jointfit {fit,simulate,validate}``.

Exit status: 0 success (fit converged), 2 fit did not converge or its
information matrix is singular (results still written), 1 input error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .em import FitConfig, fit
from .errors import InvalidInputError, JointFitError, SingularInformationError
from .inference import attach_inference
from .io import load_bundle, load_config, write_bundle, write_result
from .model import ModelParams, TimeBasis
from .simulate import SimDesign, default_true_params, simulate_draws

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2

_BASIS_CHOICES = {"intercept": "intercept", "slope": "intercept+slope", "intercept+slope": "intercept+slope"}

# built-in defaults for flags that may also come from --config
_FIT_DEFAULTS = {
    "basis": "slope",
    "quad_order": 15,
    "tol": 1e-6,
    "loglik_tol": 1e-8,
    "max_iters": 200,
    "truncate": False,
    "out": "fit.json",
    "scheme": "centered",
}


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jointfit", description="Joint longitudinal-survival model fitting.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log EM progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p):
        p.add_argument("--longitudinal", required=True, help="CSV with columns id,time,y")
        p.add_argument("--survival", required=True, help="CSV with columns id,time,event plus covariates")
        p.add_argument("--basis", choices=sorted(_BASIS_CHOICES), default=None)
        p.add_argument("--truncate", action="store_true", default=None,
                       help="drop measurements after the event/censoring time instead of rejecting them")
        p.add_argument("--config", help="JSON file of defaults; command-line flags take precedence")

    p_fit = sub.add_parser("fit", help="fit the joint model and write a JSON result")
    data_flags(p_fit)
    p_fit.add_argument("--quad-order", type=int, default=None)
    p_fit.add_argument("--tol", type=float, default=None, help="max absolute parameter change at convergence")
    p_fit.add_argument("--loglik-tol", type=float, default=None, help="relative log-likelihood change")
    p_fit.add_argument("--max-iters", type=int, default=None)
    p_fit.add_argument("--scheme", choices=["centered", "standard"], default=None)
    p_fit.add_argument("--out", default=None, help="result JSON path (default fit.json)")
    p_fit.add_argument("--seed", type=int, default=None, help="accepted for symmetry; fitting is deterministic")

    p_val = sub.add_parser("validate", help="load the data and check its invariants only")
    data_flags(p_val)

    p_sim = sub.add_parser("simulate", help="simulate a dataset and write the CSV pair")
    p_sim.add_argument("--n", type=int, default=300)
    p_sim.add_argument("--seed", type=int, default=0)
    truth = default_true_params()
    p_sim.add_argument("--alpha", type=float, default=float(truth.alpha[0]))
    p_sim.add_argument("--beta", type=_float_list, default=truth.beta.tolist())
    p_sim.add_argument("--gamma", type=float, default=float(truth.gamma[0]))
    p_sim.add_argument("--sigma", type=float, default=truth.sigma)
    p_sim.add_argument("--D", type=_float_list, default=truth.D.reshape(-1).tolist(),
                       help="random-effects covariance, row-major")
    p_sim.add_argument("--rate", type=float, default=0.2, help="constant baseline hazard")
    p_sim.add_argument("--censor-rate", type=float, default=0.1)
    p_sim.add_argument("--schedule", type=_float_list, default=[0.0, 0.5, 1.0, 1.5, 2.0])
    p_sim.add_argument("--basis", choices=sorted(_BASIS_CHOICES), default="slope")
    p_sim.add_argument("--w", default="bernoulli(0.5)", help="bernoulli(p) or normal(mu,sd)")
    p_sim.add_argument("--longitudinal", default="longitudinal.csv")
    p_sim.add_argument("--survival", default="survival.csv")
    return parser


def _merged(args, defaults: dict) -> dict:
    """flags > config file > defaults."""
    settings = dict(defaults)
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        unknown = set(cfg) - set(defaults)
        if unknown:
            raise InvalidInputError(f"unknown config keys: {sorted(unknown)}")
        settings.update(cfg)
    for key in defaults:
        value = getattr(args, key, None)
        if value is not None:
            settings[key] = value
    # config files may also name a polynomial basis, e.g. "poly(2,1)"
    if not isinstance(settings["basis"], str):
        raise InvalidInputError("basis must be a string")
    settings["basis"] = _BASIS_CHOICES.get(settings["basis"], settings["basis"])
    TimeBasis.from_name(settings["basis"])
    return settings


def _threads():
    raw = os.environ.get("JOINTFIT_THREADS")
    if raw is None:
        return None
    try:
        value = int(raw)
    except ValueError:
        value = 0
    if value < 1:
        raise InvalidInputError(f"JOINTFIT_THREADS must be a positive integer, got {raw!r}")
    return value


def _load(settings, args):
    return load_bundle(
        args.longitudinal,
        args.survival,
        basis=settings["basis"],
        truncate=bool(settings["truncate"]),
    )


def _print_table(result, out):
    names = result.params_hat.names()
    theta = result.params_hat.to_vector()
    se = result.standard_errors if result.standard_errors is not None else np.full(theta.size, np.nan)
    width = max(len(n) for n in names)
    print(f"{'parameter':<{width}}  {'estimate':>12}  {'std.err':>10}", file=out)
    for name, est, s in zip(names, theta, se):
        s_txt = "nan" if not np.isfinite(s) else f"{s:10.5f}"
        print(f"{name:<{width}}  {est:12.6f}  {s_txt:>10}", file=out)


def run_fit(args) -> int:
    settings = _merged(args, _FIT_DEFAULTS)
    _threads()
    data = _load(settings, args)
    config = FitConfig(
        quad_order=int(settings["quad_order"]),
        param_tol=float(settings["tol"]),
        loglik_tol=float(settings["loglik_tol"]),
        max_em_iters=int(settings["max_iters"]),
        scheme=settings["scheme"],
    )
    result = fit(data, config)
    status = EXIT_OK if result.converged else EXIT_NOT_CONVERGED
    try:
        attach_inference(result)
    except SingularInformationError as exc:
        print(f"warning: {exc}; standard errors left empty", file=sys.stderr)
        status = EXIT_NOT_CONVERGED
    write_result(settings["out"], result)
    _print_table(result, sys.stdout)
    n_events = sum(s.event_indicator for s in data)
    print(f"n={len(data)} events={n_events} iterations={result.n_iters} converged={result.converged}")
    print(f"final log-likelihood {result.loglik_trace[-1]:.6f}; wrote {settings['out']}")
    if not result.converged:
        print("warning: EM reached --max-iters before converging", file=sys.stderr)
    return status


def run_validate(args) -> int:
    settings = _merged(args, {"basis": "slope", "truncate": False})
    data = _load(settings, args)
    n_obs = sum(s.n_obs for s in data)
    n_events = sum(s.event_indicator for s in data)
    print(f"ok: {len(data)} subjects, {n_obs} measurements, {n_events} events, "
          f"{len(data[0].baseline_covariates)} baseline covariate(s)")
    return EXIT_OK


def run_simulate(args) -> int:
    if args.n < 1:
        raise InvalidInputError("--n must be at least 1")
    basis = TimeBasis.from_name(_BASIS_CHOICES[args.basis])
    r = basis.r
    D = np.asarray(args.D, dtype=float)
    if D.size != r * r:
        raise InvalidInputError(f"--D needs {r * r} values for basis {basis.name!r}")
    params = ModelParams([args.alpha], args.beta, [args.gamma], args.sigma, D.reshape(r, r))
    design = SimDesign(
        n_subjects=args.n,
        true_params=params,
        baseline_rate=args.rate,
        censoring_rate=args.censor_rate,
        measurement_schedule=tuple(args.schedule),
        basis=basis,
        w_distribution=args.w,
        seed=args.seed,
    )
    data, _, report = simulate_draws(design)
    for path in (args.longitudinal, args.survival):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
    write_bundle(data, args.longitudinal, args.survival)
    print(f"simulated {args.n} subjects: {report.n_events} events, {report.n_censored} censored")
    print(f"wrote {args.longitudinal} and {args.survival}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {"fit": run_fit, "simulate": run_simulate, "validate": run_validate}
    try:
        return handlers[args.command](args)
    except (InvalidInputError, ValueError, JointFitError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
