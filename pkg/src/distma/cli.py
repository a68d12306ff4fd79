"""Command-line interface.

Subcommands: ``fit``, ``egger``, ``small-study``, ``batch`` and ``simulate``.
Exit codes: 0 success, 1 usage or input error, 2 finished with a
non-convergence warning (the report is still written).
"""
from __future__ import annotations

import argparse
import json
import math
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .data_model import FAMILIES, DataError, ModelSpec, load_csv, validate, write_csv
from .fit import FitError, FitResult
from .fit import fit as run_fit
from .likelihood import InvalidShapeError, LikelihoodError, NaturalParams
from .simulate import SimScenario, simulate, standard_scenarios
from .small_study import (EggerResult, SmallStudyResult, batch_run, egger_test,
                          small_study_analysis, write_batch)

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_INPUT, EXIT_WARN = 0, 1, 2

# fixed key order of the top-level report and of the fit block
REPORT_FIELDS = ("schema_version", "invocation", "result", "timing")
FIT_FIELDS = ("family", "method", "loc_formula", "scale_formula", "n_obs", "n_params",
              "coefficients", "loglik", "aic", "bic", "convergence", "warnings")
COEF_FIELDS = ("name", "estimate", "se", "z", "p", "ci_low", "ci_high", "link")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# JSON encoding; non-finite floats become strings so reports stay valid JSON


def encode_float(x):
    if x is None:
        return None
    x = float(x)
    if math.isfinite(x):
        return x
    return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")


def decode_float(x):
    return None if x is None else float(x)


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return encode_float(obj)
    return obj


def fit_to_dict(res: FitResult) -> dict:
    spec = res.spec
    coefs = [{f: getattr(row, f) for f in COEF_FIELDS} for row in res.coef_table]
    out = {
        "family": spec.family,
        "method": res.method,
        "loc_formula": str(spec.loc_formula),
        "scale_formula": None if spec.scale_formula is None else str(spec.scale_formula),
        "n_obs": res.n_obs,
        "n_params": res.n_params,
        "coefficients": coefs,
        "loglik": res.loglik,
        "aic": res.aic,
        "bic": res.bic,
        "convergence": {"converged": res.converged, "iterations": res.iterations,
                        "gradient_norm": res.gradient_norm, "hessian_pd": res.hessian_pd},
        "warnings": list(res.warnings),
    }
    return _clean({k: out[k] for k in FIT_FIELDS})


def egger_to_dict(e: EggerResult) -> dict:
    return _clean(asdict(e))


def small_study_to_dict(r: SmallStudyResult) -> dict:
    def slope(t):
        return None if t is None else _clean(asdict(t))

    return _clean({
        "alpha": r.alpha,
        "egger": asdict(r.egger),
        "loc_slope_test": slope(r.loc_slope_test),
        "scale_slope_test": slope(r.scale_slope_test),
        "flags": dict(r.flags),
        "converged": r.converged,
        "fit": None if r.ls_fit is None else fit_to_dict(r.ls_fit),
        "warnings": list(r.warnings),
    })


def make_report(command: str, options: dict, result: dict, seconds: float) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "invocation": _clean({"command": command, **options}),
        "result": result,
        "timing": {"wall_seconds": encode_float(seconds)},
    }


def dump_report(report: dict) -> str:
    ordered = {k: report[k] for k in REPORT_FIELDS}
    return json.dumps(ordered, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def load_report(text: str) -> dict:
    return json.loads(text)


def _emit(report: dict, out: str | None):
    text = dump_report(report)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _options(args, *names):
    return {n: getattr(args, n) for n in names}


# --------------------------------------------------------------------------
# subcommands


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    if args.family not in FAMILIES:
        raise DataError(f"unknown family {args.family!r}; valid families: {', '.join(FAMILIES)}")
    table = load_csv(args.data)
    spec = ModelSpec(family=args.family, loc_formula=args.loc, scale_formula=args.scale,
                     method=args.method, sampling_cor=args.sampling_cor,
                     quad_nodes=args.quad_nodes, mixture_g=args.mixture_g,
                     scale_random_effect=args.scale_random_effect)
    res = run_fit(validate(table, spec))
    opts = _options(args, "data", "family", "loc", "scale", "method", "sampling_cor",
                    "quad_nodes", "mixture_g", "scale_random_effect")
    _emit(make_report("fit", opts, fit_to_dict(res), time.perf_counter() - t0), args.out)
    return EXIT_OK if res.converged else EXIT_WARN


def cmd_egger(args) -> int:
    t0 = time.perf_counter()
    res = egger_test(load_csv(args.data))
    _emit(make_report("egger", _options(args, "data"), egger_to_dict(res),
                      time.perf_counter() - t0), args.out)
    return EXIT_OK


def cmd_small_study(args) -> int:
    t0 = time.perf_counter()
    res = small_study_analysis(load_csv(args.data), alpha=args.alpha)
    _emit(make_report("small-study", _options(args, "data", "alpha"), small_study_to_dict(res),
                      time.perf_counter() - t0), args.out)
    return EXIT_OK if res.converged else EXIT_WARN


def cmd_batch(args) -> int:
    summary = batch_run(args.dir, alpha=args.alpha, min_k=args.min_k, workers=args.workers)
    for path in write_batch(summary, args.out_prefix):
        print(path)
    return EXIT_WARN if summary.any_not_converged else EXIT_OK


def _floats(text):
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise DataError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _pair(text, what):
    vals = _floats(text)
    if len(vals) != 2:
        raise DataError(f"{what} needs two comma-separated numbers")
    return tuple(vals)


def scenario_from_args(args) -> SimScenario:
    if args.family not in FAMILIES:
        raise DataError(f"unknown family {args.family!r}; valid families: {', '.join(FAMILIES)}")
    base = standard_scenarios(k=max(args.k, 1), seed=args.seed)[args.family]
    p = base.params
    vc = dict(p.var_components)
    kw = {}
    if args.beta is not None:
        kw["beta_loc"] = _floats(args.beta)
    if args.gamma is not None:
        kw["beta_scale"] = _floats(args.gamma)
    for flag, key in (("tau2", "tau2"), ("tau2_u", "tau2_u"), ("tau2_v", "tau2_v"),
                      ("tau2_omega", "tau2_omega"), ("tau2_tau", "tau2_tau")):
        if getattr(args, flag) is not None:
            vc[key] = getattr(args, flag)
    if args.tau is not None or args.rho is not None:
        T = np.array(p.T, dtype=float) if p.T is not None else np.eye(2)
        tau = np.sqrt(np.diag(T)) if args.tau is None else np.array(_floats(args.tau))
        rho = args.rho if args.rho is not None else T[0, 1] / np.sqrt(T[0, 0] * T[1, 1])
        if len(tau) < 2:
            raise DataError("--tau needs one value per outcome")
        if not -1 < rho < 1:
            raise DataError("--rho must lie in (-1, 1)")
        C = np.full((len(tau), len(tau)), rho)
        np.fill_diagonal(C, 1.0)
        kw["T"] = C * np.outer(tau, tau)
    for flag in ("nu", "skew", "beta_mu", "beta_tau2"):
        if getattr(args, flag) is not None:
            kw[flag] = getattr(args, flag)
    for flag in ("weights", "means", "variances"):
        if getattr(args, flag) is not None:
            kw[flag] = _floats(getattr(args, flag))
    fields = {f: getattr(p, f) for f in ("beta_loc", "beta_scale", "T", "nu", "skew", "weights",
                                           "means", "variances", "beta_mu", "beta_tau2")}
    fields.update(kw)
    params = NaturalParams(var_components=vc, **fields)
    sc = replace(base, params=params, k=args.k, seed=args.seed)
    extra = {}
    if args.v_range is not None:
        extra["v_range"] = _pair(args.v_range, "--v-range")
        extra["se_range"] = None
    if args.se_range is not None:
        extra["se_range"] = _pair(args.se_range, "--se-range")
    for flag in ("n_per_study", "studies_per_cluster", "sampling_cor", "moderator",
                 "scale_random_effect"):
        if getattr(args, flag) is not None:
            extra[flag] = getattr(args, flag)
    return replace(sc, **extra)


def _check_truth(sc: SimScenario):
    p = sc.params
    if any(v < 0 for v in p.var_components.values()):
        raise DataError("variance components must be nonnegative")
    if sc.family in ("robust_t", "robust_skew_t") and not (p.nu is not None and p.nu > 2):
        raise DataError("--nu must exceed 2")
    if sc.family == "robust_skew_t" and not (p.skew is not None and p.skew > 0):
        raise DataError("--skew must be positive")
    if sc.family == "robust_beta":
        mu, t2 = p.beta_mu, p.beta_tau2
        if not (0 < mu < 1 and 0 < t2 < mu * (1 - mu)):
            raise DataError("--beta-mu must lie in (0, 1) and --beta-tau2 in (0, mu(1-mu))")
    if sc.family == "robust_mixture":
        w = np.asarray(p.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise DataError("--weights must be nonnegative and sum to 1")
        if not len(w) == len(p.means) == len(p.variances):
            raise DataError("--weights, --means and --variances need the same length")


def cmd_simulate(args) -> int:
    if args.k < 1:
        raise DataError("--k must be at least 1")
    if args.seed < 0:
        raise DataError("--seed must be nonnegative")
    sc = scenario_from_args(args)
    _check_truth(sc)
    write_csv(simulate(sc), args.out)
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="distma", description="Distributional regression meta-analysis.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    f = sub.add_parser("fit", help="fit a model to an effect-size CSV")
    f.add_argument("--data", required=True)
    f.add_argument("--family", required=True, help=f"one of: {', '.join(FAMILIES)}")
    f.add_argument("--loc", default="1", help='location formula, e.g. "1 + mod1 + mod2"')
    f.add_argument("--scale", default=None, help="scale formula (location_scale only)")
    f.add_argument("--method", default="ml", choices=("ml", "reml"))
    f.add_argument("--sampling-cor", type=float, default=0.5)
    f.add_argument("--quad-nodes", type=int, default=None)
    f.add_argument("--mixture-g", type=int, default=2)
    f.add_argument("--scale-random-effect", action="store_true")
    f.add_argument("--out", default=None)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("egger", help="Egger's regression test")
    e.add_argument("--data", required=True)
    e.add_argument("--out", default=None)
    e.set_defaults(func=cmd_egger)

    s = sub.add_parser("small-study", help="Egger test plus location-scale small-study model")
    s.add_argument("--data", required=True)
    s.add_argument("--alpha", type=float, default=0.05)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_small_study)

    b = sub.add_parser("batch", help="small-study pipeline over a directory of CSVs")
    b.add_argument("--dir", required=True)
    b.add_argument("--alpha", type=float, default=0.05)
    b.add_argument("--min-k", type=int, default=5)
    b.add_argument("--out-prefix", default="batch")
    b.add_argument("--workers", type=int, default=None)
    b.set_defaults(func=cmd_batch)

    m = sub.add_parser("simulate", help="write a simulated table")
    m.add_argument("--family", required=True)
    m.add_argument("--k", type=int, required=True)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.add_argument("--beta", help="location coefficients (per-outcome intercepts for multivariate)")
    m.add_argument("--gamma", help="log-variance coefficients (location_scale)")
    m.add_argument("--tau2", type=float)
    m.add_argument("--tau2-u", type=float)
    m.add_argument("--tau2-v", type=float)
    m.add_argument("--tau2-omega", type=float)
    m.add_argument("--tau2-tau", type=float)
    m.add_argument("--tau", help="between-study SDs per outcome (multivariate)")
    m.add_argument("--rho", type=float, help="between-study correlation (multivariate)")
    m.add_argument("--nu", type=float)
    m.add_argument("--skew", type=float)
    m.add_argument("--beta-mu", type=float)
    m.add_argument("--beta-tau2", type=float)
    m.add_argument("--weights")
    m.add_argument("--means")
    m.add_argument("--variances")
    m.add_argument("--v-range")
    m.add_argument("--se-range")
    m.add_argument("--n-per-study", type=int)
    m.add_argument("--studies-per-cluster", type=int)
    m.add_argument("--sampling-cor", type=float)
    m.add_argument("--moderator", choices=("x", "se"))
    m.add_argument("--scale-random-effect", action="store_true", default=None)
    m.set_defaults(func=cmd_simulate)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except (DataError, FitError, InvalidShapeError, LikelihoodError, OSError, ValueError) as exc:
        print(f"distma: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
