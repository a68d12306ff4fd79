"""Maximum (restricted) likelihood fitting and likelihood-based inference."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
from scipy import optimize, stats

from .data_model import DataError, ModelInput
from .likelihood import (InvalidShapeError, LikelihoodError, NaturalParams, clamp_active,
                         is_gaussian, location_design, loglik, whiten)
from .numerics import NonFiniteError, fd_gradient, fd_hessian

logger = logging.getLogger(__name__)

VAR_FLOOR = 1e-10
LOG_VAR_FLOOR = math.log(VAR_FLOOR)
BOUNDARY = math.log(1e-8)
# beyond this the t likelihood is numerically normal; nu is parked here
NU_MAX = 1e4
LOG_NU_MAX = math.log(NU_MAX - 2.0)
Z95 = stats.norm.ppf(0.975)
GRAD_TOL = 1e-4
# Hessian step in scaled coordinates: truncation error is then the same
# for rescaled data, and a larger step keeps rounding noise below 1e-8
HESS_STEP = 1e-3


class FitError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# parameter layout and transforms


@dataclass(frozen=True)
class Coord:
    """One unconstrained optimizer coordinate.

    ``kind`` selects the transform: ``coef`` and ``scale_coef`` (identity),
    ``logvar`` (log variance with floor), ``nu`` (log(nu - 2)), ``logpos``
    (log), ``chol_diag``/``chol_off`` (log-Cholesky of T), ``stick``
    (stick-breaking logits of mixture weights), ``mix_mean``, ``mix_logvar``,
    ``logit_mu`` and ``beta_tau2`` (logit of the fraction of the largest
    variance keeping both beta shapes above 1).
    """

    name: str
    kind: str
    index: tuple = ()


@dataclass(frozen=True)
class ParamLayout:
    family: str
    coords: tuple[Coord, ...]
    n_outcomes: int = 0
    n_components: int = 0
    var_names: tuple[str, ...] = ()

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.coords)

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"no parameter named {name!r}; parameters: {', '.join(self.names)}") from None

    def mask(self, *kinds) -> np.ndarray:
        return np.array([c.kind in kinds for c in self.coords], dtype=bool)

    def __len__(self):
        return len(self.coords)


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    layout: ParamLayout


def make_layout(bundle: ModelInput) -> ParamLayout:
    fam = bundle.family
    spec = bundle.spec
    _, loc_names = location_design(bundle)
    coords: list[Coord] = []
    if fam not in ("robust_beta", "robust_mixture"):
        coords += [Coord(f"beta[{nm}]", "coef", (i,)) for i, nm in enumerate(loc_names)]
    var_names: tuple[str, ...] = ()
    n_out = n_comp = 0
    if fam == "location_scale":
        coords += [Coord(f"gamma[{nm}]", "scale_coef", (i,))
                   for i, nm in enumerate(bundle.Z.column_names)]
        if spec.scale_random_effect:
            var_names = ("tau2_tau",)
    elif fam == "multilevel3":
        var_names = ("tau2_u", "tau2_v", "tau2_omega")
    elif fam in ("normal_re", "normal_metareg", "glmm_binomial", "glmm_poisson",
                 "robust_t", "robust_skew_t"):
        var_names = ("tau2",)
    coords += [Coord(nm, "logvar") for nm in var_names]
    if fam == "multivariate":
        n_out = len(bundle.outcomes)
        for i in range(n_out):
            for j in range(i + 1):
                kind = "chol_diag" if i == j else "chol_off"
                coords.append(Coord(f"chol[{i + 1},{j + 1}]", kind, (i, j)))
    if fam in ("robust_t", "robust_skew_t"):
        coords.append(Coord("nu", "nu"))
    if fam == "robust_skew_t":
        coords.append(Coord("skew", "logpos"))
    if fam == "robust_beta":
        coords += [Coord("beta_mu", "logit_mu"), Coord("beta_tau2", "beta_tau2")]
    if fam == "robust_mixture":
        n_comp = spec.mixture_g
        coords += [Coord(f"stick[{g + 1}]", "stick", (g,)) for g in range(n_comp - 1)]
        coords += [Coord(f"mu[{g + 1}]", "mix_mean", (g,)) for g in range(n_comp)]
        coords += [Coord(f"tau2[{g + 1}]", "mix_logvar", (g,)) for g in range(n_comp)]
    return ParamLayout(fam, tuple(coords), n_out, n_comp, var_names)


def _logit(p):
    return math.log(p) - math.log1p(-p)


def _expit(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def beta_tau2_max(mu: float) -> float:
    """Largest beta variance at mean ``mu`` with both shape parameters > 1."""
    m = min(mu, 1.0 - mu)
    return mu * (1.0 - mu) * m / (1.0 + m)


def _log_floor(v):
    return math.log(max(v, VAR_FLOOR))


def _exp_floor(x):
    return math.exp(max(x, LOG_VAR_FLOOR))


def transform(p: NaturalParams, layout: ParamLayout) -> ParamVector:
    """Natural parameters to unconstrained coordinates."""
    x = np.empty(len(layout))
    L = None
    if layout.n_outcomes:
        T = np.asarray(p.T, dtype=float)
        if np.max(np.abs(T - T.T)) > 1e-12 * max(1.0, np.max(np.abs(T))):
            raise ValueError("T must be symmetric")
        try:
            L = np.linalg.cholesky(T)
        except np.linalg.LinAlgError:
            try:
                L = np.linalg.cholesky(T + VAR_FLOOR * np.eye(len(T)))
            except np.linalg.LinAlgError:
                raise ValueError("T must be positive semi-definite") from None
    stick = None
    if layout.n_components:
        w = np.asarray(p.weights, dtype=float)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        rest = 1.0 - np.concatenate([[0.0], np.cumsum(w)[:-1]])
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.clip(w[:-1] / rest[:-1], 0.0, 1.0)
        stick = frac
    for i, c in enumerate(layout.coords):
        k = c.kind
        if k == "coef":
            x[i] = p.beta_loc[c.index[0]]
        elif k == "scale_coef":
            x[i] = p.beta_scale[c.index[0]]
        elif k == "logvar":
            val = p.var_components[c.name]
            if val < 0:
                raise ValueError(f"{c.name} must be nonnegative")
            x[i] = _log_floor(val)
        elif k == "nu":
            if not p.nu > 2:
                raise ValueError("nu must exceed 2")
            x[i] = math.log(p.nu - 2.0)
        elif k == "logpos":
            if not p.skew > 0:
                raise ValueError("skew must be positive")
            x[i] = math.log(p.skew)
        elif k == "chol_diag":
            x[i] = math.log(max(L[c.index], math.sqrt(VAR_FLOOR)))
        elif k == "chol_off":
            x[i] = L[c.index]
        elif k == "stick":
            f = stick[c.index[0]]
            x[i] = math.inf if f >= 1 else (-math.inf if f <= 0 else _logit(f))
        elif k == "mix_mean":
            x[i] = p.means[c.index[0]]
        elif k == "mix_logvar":
            val = p.variances[c.index[0]]
            if val < 0:
                raise ValueError("mixture variances must be nonnegative")
            x[i] = _log_floor(val)
        elif k == "logit_mu":
            if not 0 < p.beta_mu < 1:
                raise ValueError("beta_mu must lie in (0, 1)")
            x[i] = _logit(p.beta_mu)
        elif k == "beta_tau2":
            frac = p.beta_tau2 / beta_tau2_max(p.beta_mu)
            if not 0 < frac < 1:
                raise ValueError("beta_tau2 must keep both beta shapes above 1")
            x[i] = _logit(frac)
        else:
            raise ValueError(f"unknown coordinate kind {k!r}")
    return ParamVector(x, layout)


def untransform(x, layout: ParamLayout) -> NaturalParams:
    """Unconstrained coordinates to natural parameters."""
    if isinstance(x, ParamVector):
        layout, x = x.layout, x.values
    x = np.asarray(x, dtype=float)
    beta_loc, beta_scale, var = [], [], {}
    kw: dict = {}
    L = np.zeros((layout.n_outcomes, layout.n_outcomes)) if layout.n_outcomes else None
    sticks, means, variances = [], [], []
    mu = None
    for c, val in zip(layout.coords, x):
        k = c.kind
        if k == "coef":
            beta_loc.append(val)
        elif k == "scale_coef":
            beta_scale.append(val)
        elif k == "logvar":
            var[c.name] = _exp_floor(val)
        elif k == "nu":
            kw["nu"] = 2.0 + math.exp(min(val, LOG_NU_MAX))
        elif k == "logpos":
            kw["skew"] = math.exp(val)
        elif k == "chol_diag":
            L[c.index] = math.exp(max(val, 0.5 * LOG_VAR_FLOOR))
        elif k == "chol_off":
            L[c.index] = val
        elif k == "stick":
            sticks.append(_expit(val))
        elif k == "mix_mean":
            means.append(val)
        elif k == "mix_logvar":
            variances.append(_exp_floor(val))
        elif k == "logit_mu":
            mu = _expit(val)
            kw["beta_mu"] = mu
        elif k == "beta_tau2":
            frac = _expit(val)
            kw["beta_tau2"] = frac * beta_tau2_max(mu)
    if L is not None:
        kw["T"] = L @ L.T
    if layout.n_components:
        w = []
        rest = 1.0
        for s in sticks:
            w.append(rest * s)
            rest -= rest * s
        w.append(max(rest, 0.0))
        kw["weights"] = np.array(w)
        kw["means"] = np.array(means)
        kw["variances"] = np.array(variances)
    return NaturalParams(
        beta_loc=np.array(beta_loc), beta_scale=np.array(beta_scale) if beta_scale else None,
        var_components=var, **kw)


def natural_to_coord(coord: Coord, value: float, current: NaturalParams | None = None) -> float:
    """Coordinate value for a scalar natural value of one parameter."""
    k = coord.kind
    if k in ("coef", "scale_coef", "chol_off", "mix_mean"):
        return float(value)
    if k in ("logvar", "mix_logvar"):
        if value < 0:
            raise ValueError(f"{coord.name} must be nonnegative")
        return _log_floor(value)
    if k == "chol_diag":
        return math.log(max(value, math.sqrt(VAR_FLOOR)))
    if k == "nu":
        if not value > 2:
            raise ValueError("nu must exceed 2")
        return min(math.log(value - 2.0), LOG_NU_MAX)
    if k == "logpos":
        return math.log(value)
    if k == "logit_mu":
        return _logit(value)
    if k == "beta_tau2" and current is not None:
        return _logit(value / beta_tau2_max(current.beta_mu))
    raise ValueError(f"parameter {coord.name!r} cannot be set individually")


# --------------------------------------------------------------------------
# starting values


def _wls(X, y, w):
    Xw = X * np.sqrt(w)[:, None]
    beta = np.linalg.lstsq(Xw, y * np.sqrt(w), rcond=None)[0]
    return beta


def _moment_tau2(X, y, v):
    """Method-of-moments residual heterogeneity (DerSimonian-Laird type)."""
    w = 1.0 / v
    beta = _wls(X, y, w)
    r = y - X @ beta
    Q = np.sum(w * r * r)
    n, p = X.shape
    XtWX_inv = np.linalg.inv(X.T @ (X * w[:, None]))
    trace = np.sum(w) - np.trace(XtWX_inv @ (X.T @ (X * (w * w)[:, None])))
    if n <= p or trace <= 0:
        return 0.0, beta
    return max(0.0, (Q - (n - p)) / trace), beta


def _glm_start(X, y, size, kind):
    """A few IRLS steps for the pooled GLM (no random effect)."""
    if kind == "binomial":
        p0 = (y.sum() + 0.5) / (size.sum() + 1.0)
        beta = np.zeros(X.shape[1])
        if X.shape[1] and np.allclose(X[:, 0], 1):
            beta[0] = math.log(p0 / (1 - p0))
    else:
        rate = (y.sum() + 0.5) / size.sum()
        beta = np.zeros(X.shape[1])
        if X.shape[1] and np.allclose(X[:, 0], 1):
            beta[0] = math.log(rate)
    for _ in range(25):
        eta = np.clip(X @ beta, -30, 30)
        if kind == "binomial":
            prob = 1.0 / (1.0 + np.exp(-eta))
            w = size * prob * (1 - prob)
            score = X.T @ (y - size * prob)
        else:
            mean = size * np.exp(eta)
            w = mean
            score = X.T @ (y - mean)
        info = X.T @ (X * w[:, None]) + 1e-8 * np.eye(X.shape[1])
        step = np.linalg.solve(info, score)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


def default_start(bundle: ModelInput) -> NaturalParams:
    fam = bundle.family
    t = bundle.table
    X, _ = location_design(bundle)
    if fam in ("glmm_binomial", "glmm_poisson"):
        kind = "binomial" if fam == "glmm_binomial" else "poisson"
        if kind == "binomial":
            y, size = t.events.astype(float), t.trials.astype(float)
        else:
            y = t.count.astype(float)
            size = np.ones_like(y) if t.exposure is None else t.exposure.astype(float)
        beta = _glm_start(X, y, size, kind)
        return NaturalParams(beta_loc=beta, var_components={"tau2": 0.1})
    y, v = t.y, t.v
    tau2, beta = _moment_tau2(X, y, v)
    floor = 0.05 * float(np.mean(v))
    tau2s = max(tau2, floor)
    if fam in ("normal_re", "normal_metareg"):
        return NaturalParams(beta_loc=beta, var_components={"tau2": tau2s})
    if fam == "location_scale":
        gamma = np.zeros(bundle.Z.shape[1])
        names = bundle.Z.column_names
        if "intercept" in names:
            gamma[names.index("intercept")] = math.log(tau2s)
        var = {"tau2_tau": 0.1} if bundle.spec.scale_random_effect else {}
        return NaturalParams(beta_loc=beta, beta_scale=gamma, var_components=var)
    if fam == "multilevel3":
        third = tau2s / 3.0
        return NaturalParams(beta_loc=beta, var_components={
            "tau2_u": third, "tau2_v": third, "tau2_omega": third})
    if fam == "multivariate":
        code = np.searchsorted(bundle.outcomes, t.outcome)
        diag = []
        for o in range(len(bundle.outcomes)):
            rows = code == o
            Xo = X[rows][:, np.any(X[rows] != 0, axis=0)]
            t2, _ = _moment_tau2(Xo, y[rows], v[rows])
            diag.append(max(t2, 0.05 * float(np.mean(v[rows]))))
        return NaturalParams(beta_loc=beta, T=np.diag(diag))
    if fam in ("robust_t", "robust_skew_t"):
        kw = {"skew": 1.0} if fam == "robust_skew_t" else {}
        return NaturalParams(beta_loc=beta, var_components={"tau2": tau2s}, nu=10.0, **kw)
    if fam == "robust_beta":
        w = 1.0 / (v + tau2s)
        mu = float(np.clip(np.sum(w * y) / np.sum(w), 0.05, 0.95))
        t2 = min(max(tau2, 1e-4), 0.5 * beta_tau2_max(mu))
        return NaturalParams(beta_mu=mu, beta_tau2=t2)
    if fam == "robust_mixture":
        G = bundle.spec.mixture_g
        qs = np.quantile(y, (np.arange(G) + 1.0) / (G + 1.0))
        comp = max(tau2, 0.01 * float(np.mean(v))) / G
        return NaturalParams(weights=np.full(G, 1.0 / G), means=qs, variances=np.full(G, comp))
    raise DataError(f"no starting values for {fam}")


def _coord_scales(bundle: ModelInput, layout: ParamLayout, start: NaturalParams) -> np.ndarray:
    t = bundle.table
    X, _ = location_design(bundle)
    if bundle.family in ("glmm_binomial", "glmm_poisson"):
        spread = 1.0
    else:
        spread = math.sqrt(float(np.mean(t.v)) + start.var_components.get("tau2", 0.0))
    out = np.empty(len(layout))
    for i, c in enumerate(layout.coords):
        if c.kind == "coef":
            col = X[:, c.index[0]]
            out[i] = 0.5 * spread / max(math.sqrt(np.mean(col * col)), 1e-8)
        elif c.kind == "scale_coef":
            col = bundle.Z.values[:, c.index[0]]
            out[i] = 0.5 / max(math.sqrt(np.mean(col * col)), 1e-8)
        elif c.kind == "mix_mean":
            out[i] = 0.5 * spread
        else:
            out[i] = 0.5
    return out


# --------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class CoefRow:
    name: str
    estimate: float
    se: float | None
    z: float | None
    p: float | None
    ci_low: float | None
    ci_high: float | None
    link: str = "identity"

    @property
    def flagged(self) -> bool:
        return self.se is None


@dataclass
class FitResult:
    spec: object
    estimates: NaturalParams
    coef_table: list[CoefRow]
    loglik: float
    aic: float
    bic: float
    converged: bool
    iterations: int
    gradient_norm: float
    hessian_pd: bool
    warnings: list[str] = field(default_factory=list)
    n_obs: int = 0
    n_params: int = 0
    method: str = "ml"
    layout: ParamLayout | None = None
    x: np.ndarray | None = None
    free: np.ndarray | None = None
    cov: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    def coef(self, name: str) -> CoefRow:
        for row in self.coef_table:
            if row.name == name:
                return row
        raise KeyError(f"no coefficient named {name!r}")

    @property
    def family(self) -> str:
        return self.spec.family


_LINKS = {
    "identity": (lambda q: q, lambda e: e, lambda q: 1.0),
    "log": (math.log, math.exp, lambda q: 1.0 / q),
    "logm2": (lambda q: math.log(q - 2.0), lambda e: 2.0 + math.exp(e), lambda q: 1.0 / (q - 2.0)),
    "logit": (_logit, _expit, lambda q: 1.0 / (q * (1.0 - q))),
    "atanh": (math.atanh, math.tanh, lambda q: 1.0 / (1.0 - q * q)),
}


def wald_row(name: str, estimate: float, se: float | None, link: str = "identity") -> CoefRow:
    """Wald z test and 95% interval; the interval is formed on the link scale
    and mapped back. z and p are reported for identity-link rows only."""
    if se is None or not np.isfinite(se):
        return CoefRow(name, float(estimate), None, None, None, None, None, link)
    fwd, inv, deriv = _LINKS[link]
    z = p = None
    if link == "identity":
        if se > 0:
            z = estimate / se
            p = float(2.0 * stats.norm.sf(abs(z)))
        else:
            z = 0.0 if estimate == 0 else math.copysign(math.inf, estimate)
            p = 1.0 if estimate == 0 else 0.0
        lo, hi = estimate - Z95 * se, estimate + Z95 * se
    else:
        try:
            e = fwd(estimate)
            se_link = se * abs(deriv(estimate))
            lo, hi = inv(e - Z95 * se_link), inv(e + Z95 * se_link)
        except (ValueError, OverflowError, ZeroDivisionError):
            lo = hi = None
    return CoefRow(name, float(estimate), float(se), z, p, lo, hi, link)


def wald_table(fit: FitResult) -> list[CoefRow]:
    """Coefficient table of a fit; rows without a standard error carry NA."""
    rows = [wald_row(r.name, r.estimate, r.se, r.link) for r in fit.coef_table]
    if any(r.se is None for r in rows) and not fit.hessian_pd:
        msg = "Hessian not positive definite; some standard errors unavailable"
        if msg not in fit.warnings:
            fit.warnings.append(msg)
    return rows


def _quantities(layout: ParamLayout, bundle: ModelInput):
    """Reported quantities: (name, link, function of the natural parameters)."""
    out = []
    for c in layout.coords:
        if c.kind == "coef":
            out.append((c.name, "identity", lambda p, i=c.index[0]: p.beta_loc[i]))
        elif c.kind == "scale_coef":
            out.append((c.name, "identity", lambda p, i=c.index[0]: p.beta_scale[i]))
        elif c.kind == "logvar":
            out.append((c.name, "log", lambda p, n=c.name: p.var_components[n]))
        elif c.kind == "nu":
            out.append(("nu", "logm2", lambda p: p.nu))
        elif c.kind == "logpos":
            out.append(("skew", "log", lambda p: p.skew))
        elif c.kind == "logit_mu":
            out.append(("beta_mu", "logit", lambda p: p.beta_mu))
        elif c.kind == "beta_tau2":
            out.append(("beta_tau2", "log", lambda p: p.beta_tau2))
    if layout.n_outcomes:
        outs = bundle.outcomes
        for i, o in enumerate(outs):
            out.append((f"tau2[{o}]", "log", lambda p, i=i: p.T[i, i]))
        for i in range(len(outs)):
            for j in range(i):
                out.append((f"rho[{outs[i]},{outs[j]}]", "atanh",
                            lambda p, i=i, j=j: p.T[i, j] / math.sqrt(p.T[i, i] * p.T[j, j])))
    if layout.n_components:
        for g in range(layout.n_components):
            out.append((f"w[{g + 1}]", "logit", lambda p, g=g: p.weights[g]))
        for g in range(layout.n_components):
            out.append((f"mu[{g + 1}]", "identity", lambda p, g=g: p.means[g]))
        for g in range(layout.n_components):
            out.append((f"tau2[{g + 1}]", "log", lambda p, g=g: p.variances[g]))
    return out


# --------------------------------------------------------------------------
# fitting


QUASI_NEWTON_FIRST = ("robust_t", "robust_skew_t", "robust_beta", "glmm_binomial", "glmm_poisson")


class _Objective:
    """Negative (restricted) log-likelihood over a subset of coordinates."""

    def __init__(self, bundle, layout, x_full, mask, profile, method):
        self.bundle, self.layout = bundle, layout
        self.x_full = np.array(x_full, dtype=float)
        self.mask = mask
        self.profile = profile
        self.method = method
        self.beta_idx = np.flatnonzero(layout.mask("coef"))
        self.nfev = 0

    def full(self, x):
        xf = self.x_full.copy()
        xf[self.mask] = x
        return xf

    def loglik(self, x) -> float:
        self.nfev += 1
        xf = self.full(x)
        p = untransform(xf, self.layout)
        try:
            if self.profile:
                w = whiten(self.bundle, p)
                if self.method == "reml":
                    return w.reml()
                beta, _ = w.gls()
                return w.loglik(beta)
            return loglik(self.bundle, p, self.method)
        except (LikelihoodError, InvalidShapeError, np.linalg.LinAlgError, FloatingPointError):
            return -math.inf

    def __call__(self, x) -> float:
        with np.errstate(all="ignore"):
            val = -self.loglik(x)
        return val if np.isfinite(val) else math.inf

    def complete(self, xf):
        """Fill profiled location coefficients with their GLS values."""
        if not self.profile:
            return xf, None
        p = untransform(xf, self.layout)
        w = whiten(self.bundle, p)
        beta, cov = w.gls()
        xf = xf.copy()
        xf[self.beta_idx] = beta
        return xf, cov


def _nelder_mead(obj, x0, scales, max_iter, rel_tol, f0):
    n = len(x0)
    simplex = np.vstack([x0] + [x0 + scales[i] * np.eye(n)[i] for i in range(n)])
    res = optimize.minimize(obj, x0, method="Nelder-Mead", options={
        "initial_simplex": simplex, "maxiter": max_iter, "maxfev": 20 * max_iter,
        "xatol": 1e-6, "fatol": rel_tol * max(1.0, abs(f0)), "adaptive": n > 4})
    return res


def _quasi_newton(obj, x0, f0):
    """BFGS with central-difference gradients; ``None`` unless it stops at a
    point with a small scaled gradient. Newton polish does the last digits."""
    try:
        res = optimize.minimize(obj, x0, method="BFGS", jac=lambda z: fd_gradient(obj, z),
                                options={"gtol": 1e-6 * max(1.0, abs(f0)), "maxiter": 500})
        if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
            return None
        g = fd_gradient(obj, res.x)
    except (NonFiniteError, ValueError, FloatingPointError):
        return None
    scaled = np.max(np.abs(g) * np.maximum(1.0, np.abs(res.x))) / max(1.0, abs(res.fun))
    return res if scaled < GRAD_TOL else None


def _newton_polish(obj, x, free_idx, steps=8):
    """Newton iterations with finite-difference derivatives on interior coordinates."""
    x = x.copy()
    fx = obj(x)
    for _ in range(steps):
        if len(free_idx) == 0:
            break

        def sub(z):
            xx = x.copy()
            xx[free_idx] = z
            return obj(xx)

        try:
            g = fd_gradient(sub, x[free_idx], rel_step=1e-5)
            H = fd_hessian(sub, x[free_idx])
        except NonFiniteError:
            break
        try:
            if np.min(np.linalg.eigvalsh(H)) <= 0:
                break
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        # predicted gain below rounding level: already at the optimum
        if -0.5 * float(g @ step) <= 1e-12 * max(1.0, abs(fx)):
            break
        improved = False
        for _ in range(20):
            xn = x.copy()
            xn[free_idx] += step
            fn = obj(xn)
            if fn <= fx + 4 * np.finfo(float).eps * abs(fx):
                improved = True
                break
            step *= 0.5
        if not improved:
            break
        done = np.max(np.abs(step)) < 1e-12 * max(1.0, np.max(np.abs(x)))
        x, fx = xn, fn
        if done:
            break
    return x, fx


def _sort_mixture(xf, layout):
    p = untransform(xf, layout)
    order = np.argsort(p.means, kind="stable")
    if np.all(order == np.arange(len(order))):
        return xf
    p = replace(p, weights=p.weights[order], means=p.means[order], variances=p.variances[order])
    return transform(p, layout).values


def fit(bundle: ModelInput, start: Mapping[str, float] | None = None,
        fixed: Mapping[str, float] | None = None, max_iter: int = 2000,
        rel_tol: float = 1e-10, polish: bool = True) -> FitResult:
    """Maximize the family likelihood.

    ``start`` and ``fixed`` map parameter names (see :func:`make_layout`) to
    natural-scale values; fixed parameters are held constant and are not
    counted as free. Location coefficients of Gaussian-marginal families are
    profiled by generalized least squares while the optimizer works on the
    remaining coordinates (Nelder-Mead, then quasi-Newton and Newton polish;
    quadrature-based families start with quasi-Newton).
    """
    spec = bundle.spec
    method = spec.method
    layout = make_layout(bundle)
    nat0 = default_start(bundle)
    x = transform(nat0, layout).values
    fixed = dict(fixed or {})
    for name, val in {**dict(start or {}), **fixed}.items():
        i = layout.index(name)
        x[i] = natural_to_coord(layout.coords[i], val, untransform(x, layout))
    free = np.ones(len(layout), dtype=bool)
    for name in fixed:
        free[layout.index(name)] = False
    beta_mask = layout.mask("coef")
    profile = is_gaussian(bundle) and not np.any(beta_mask & ~free)
    if method == "reml" and not profile:
        raise FitError("REML needs free location coefficients")
    opt_mask = free & ~beta_mask if profile else free.copy()
    var_kinds = ("logvar", "mix_logvar", "chol_diag")
    var_mask = layout.mask(*var_kinds)
    nu_mask = layout.mask("nu")

    obj = _Objective(bundle, layout, x, opt_mask, profile, method)
    x0 = x[opt_mask]
    f0 = obj(x0)
    if not np.isfinite(f0):
        raise FitError("log-likelihood is not finite at the starting values; "
                       "supply start overrides")
    warnings: list[str] = []
    iterations = 0
    nm_ok = True
    if opt_mask.any():
        scales = _coord_scales(bundle, layout, nat0)[opt_mask]
        xo = None
        quasi_newton = False
        if bundle.family in QUASI_NEWTON_FIRST:
            # smooth but costly quadrature likelihoods: far fewer evaluations
            # than a simplex; Nelder-Mead remains the fallback
            qres = _quasi_newton(obj, x0, f0)
            if qres is not None:
                iterations += qres.nit
                xo = qres.x
                quasi_newton = True
        if xo is None:
            res = _nelder_mead(obj, x0, scales, max_iter, rel_tol, f0)
            iterations += res.nit
            nm_ok = res.status == 0
            xo = res.x
            if nm_ok and len(xo) > 1:
                # a restart guards against a collapsed simplex
                res2 = _nelder_mead(obj, xo, np.maximum(0.1 * scales, 1e-3), max_iter, rel_tol,
                                    res.fun)
                iterations += res2.nit
                if res2.fun <= res.fun:
                    xo = res2.x
        # park coordinates that drifted into the flat region below the floor
        var_sub = var_mask[opt_mask]
        nu_sub = nu_mask[opt_mask]
        xo = np.where(var_sub, np.maximum(xo, LOG_VAR_FLOOR), xo)
        xo = np.where(nu_sub, np.minimum(xo, LOG_NU_MAX), xo)
        if polish:
            interior = np.flatnonzero(~((var_sub & (xo < BOUNDARY))
                                        | (nu_sub & (xo >= LOG_NU_MAX - 1e-6))))
            def sub(z):
                return obj(_put(xo, interior, z))

            if not quasi_newton:
                try:
                    bres = optimize.minimize(sub, xo[interior], method="BFGS",
                                             jac=lambda z: fd_gradient(sub, z),
                                             options={"gtol": 1e-9, "maxiter": 200})
                    if np.all(np.isfinite(bres.x)) and bres.fun <= obj(xo):
                        xo = _put(xo, interior, bres.x)
                        iterations += bres.nit
                except (NonFiniteError, ValueError, FloatingPointError):
                    pass
            xo, _ = _newton_polish(obj, xo, interior)
        x[opt_mask] = xo
    if layout.n_components:
        x = _sort_mixture(x, layout)
    x, beta_cov = obj.complete(x)

    # inference
    at_floor = (var_mask & (x < BOUNDARY)) | (nu_mask & (x >= LOG_NU_MAX - 1e-6))
    if method == "reml":
        inf_mask = free & ~beta_mask
    else:
        inf_mask = free.copy()
    interior_mask = inf_mask & ~at_floor
    ll_obj = _Objective(bundle, layout, x, interior_mask,
                        profile and method == "reml", method)
    xi = x[interior_mask]
    ll_hat = ll_obj.loglik(xi)
    cov_full = np.zeros((len(layout), len(layout)))
    known = np.zeros(len(layout), dtype=bool)
    hessian_pd = True
    gnorm = 0.0
    if interior_mask.any():
        # differences in units of each coordinate's natural scale, so the
        # steps follow any rescaling of the data
        D = _coord_scales(bundle, layout, nat0)[interior_mask]

        def f(u):
            return ll_obj.loglik(xi + D * u)

        try:
            u0 = np.zeros_like(xi)
            g = fd_gradient(f, u0) / D
            H = fd_hessian(f, u0, rel_step=HESS_STEP) / np.outer(D, D)
            gnorm = float(np.max(np.abs(g) * np.maximum(1.0, np.abs(xi)))
                          / max(1.0, abs(ll_hat)))
            eig = np.linalg.eigvalsh(-H)
            hessian_pd = bool(np.min(eig) > 1e-12 * max(1.0, np.max(np.abs(eig))))
            if hessian_pd:
                sub = np.linalg.inv(-H)
                idx = np.flatnonzero(interior_mask)
                cov_full[np.ix_(idx, idx)] = sub
                known[idx] = True
        except (NonFiniteError, np.linalg.LinAlgError):
            hessian_pd = False
            gnorm = math.inf
    if method == "reml":
        idx = np.flatnonzero(beta_mask)
        cov_full[np.ix_(idx, idx)] = beta_cov
        known[idx] = True
    if not hessian_pd:
        warnings.append("Hessian not positive definite; standard errors unavailable")
    for i in np.flatnonzero(at_floor & free):
        what = "nu at upper bound" if nu_mask[i] else "variance at boundary"
        warnings.append(f"{what}: {layout.coords[i].name}")
    estimates = untransform(x, layout)
    if clamp_active(bundle, estimates):
        warnings.append("log-variance predictor reached the exp clamp")
    converged = bool(nm_ok and gnorm < GRAD_TOL and np.isfinite(ll_hat))
    if not converged:
        warnings.append("optimizer did not converge")

    rows = _coef_rows(bundle, layout, x, cov_full, known, free)
    cov_full[~known, :] = np.nan
    cov_full[:, ~known] = np.nan
    q = int(np.sum(inf_mask))
    n_obs = bundle.n
    aic = -2.0 * ll_hat + 2.0 * q
    bic = -2.0 * ll_hat + q * math.log(n_obs)
    if method == "reml":
        warnings.append("REML information criteria are not comparable across fixed-effect structures")
    return FitResult(
        spec=spec, estimates=estimates, coef_table=rows, loglik=float(ll_hat), aic=aic, bic=bic,
        converged=converged, iterations=int(iterations), gradient_norm=gnorm,
        hessian_pd=hessian_pd, warnings=warnings, n_obs=n_obs, n_params=q, method=method,
        layout=layout, x=x, free=free, cov=cov_full,
        diagnostics={"nfev": obj.nfev, "profiled": profile,
                     "at_boundary": [layout.coords[i].name for i in np.flatnonzero(at_floor & free)]})


def _put(base, idx, vals):
    out = np.array(base, dtype=float)
    out[idx] = vals
    return out


def _coef_rows(bundle, layout, x, cov_full, valid, free):
    rows = []
    vidx = np.flatnonzero(valid)
    cov = cov_full[np.ix_(vidx, vidx)]
    h = 1e-6 * np.maximum(1.0, np.abs(x))
    for name, link, fn in _quantities(layout, bundle):
        est = float(fn(untransform(x, layout)))
        # delta method over the coordinates that carry a covariance
        jac = np.zeros(len(x))
        for i in range(len(x)):
            if not free[i]:
                continue
            xp, xm = x.copy(), x.copy()
            xp[i] += h[i]
            xm[i] -= h[i]
            jac[i] = (fn(untransform(xp, layout)) - fn(untransform(xm, layout))) / (2 * h[i])
        depends = np.abs(jac) > 0
        if np.any(depends & ~valid):
            se = None
        else:
            j = jac[vidx]
            var = float(j @ cov @ j)
            se = math.sqrt(var) if var >= 0 else None
        rows.append(wald_row(name, est, se, link))
    return rows


# --------------------------------------------------------------------------
# model comparison


@dataclass(frozen=True)
class LRTResult:
    statistic: float
    df: int
    p: float


def lrt(full: FitResult, reduced: FitResult) -> LRTResult:
    """Likelihood-ratio test of a nested (reduced) model against a full model."""
    if full.method != "ml" or reduced.method != "ml":
        raise ValueError("LRT requires ML fits")
    if full.n_obs != reduced.n_obs:
        raise ValueError("LRT needs fits to the same data")
    df = full.n_params - reduced.n_params
    if df <= 0:
        raise ValueError(f"full model must have more free parameters than the reduced one (df={df})")
    stat = max(0.0, 2.0 * (full.loglik - reduced.loglik))
    return LRTResult(stat, df, float(stats.chi2.sf(stat, df)))


@dataclass(frozen=True)
class QResult:
    Q: float
    df: int
    p: float
    I2: float


def q_statistic(data) -> QResult:
    """Cochran's Q heterogeneity statistic and I^2 (in percent)."""
    table = data.table if isinstance(data, ModelInput) else data
    y, v = np.asarray(table.y, dtype=float), np.asarray(table.v, dtype=float)
    k = len(y)
    if k < 2:
        raise ValueError("Q statistic needs at least 2 effects")
    w = 1.0 / v
    mu = np.sum(w * y) / np.sum(w)
    Q = float(np.sum(w * (y - mu) ** 2))
    df = k - 1
    I2 = max(0.0, (Q - df) / Q) * 100.0 if Q > 0 else 0.0
    return QResult(Q, df, float(stats.chi2.sf(Q, df)), I2)
