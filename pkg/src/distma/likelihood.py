"""Marginal (and restricted) log-likelihoods for every model family.

Each family is a special case of the distributional regression framework:
the location enters through an identity link, variances and Poisson rates
through a log link and binomial probabilities through a logit link.
Random-effect integrals without a closed form are evaluated by
Gauss-Hermite quadrature centred at the mode of the integrand (composite
Gauss-Legendre for the bounded beta random effect).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import betaln, gammaln, log_ndtr, ndtr

from .data_model import GAUSSIAN_FAMILIES, ModelInput
from .numerics import (NotPositiveDefiniteError, cholesky, gauss_hermite,
                       gauss_legendre_01, log_sum_exp)

LOG_2PI = np.log(2.0 * np.pi)
ETA_CLAMP = 50.0
MODE_MAX_ITER = 50
MODE_TOL = 1e-10
# composite rules are insensitive to small errors in the ring centre
PANEL_MODE_TOL = 1e-6


class LikelihoodError(FloatingPointError):
    """The likelihood could not be evaluated at the requested parameters."""


class InvalidShapeError(ValueError):
    """Shape parameters outside their domain."""


@dataclass(frozen=True)
class NaturalParams:
    """Model parameters on their natural scale.

    ``var_components`` holds the named variances used by the family:
    ``tau2`` (single-level families), ``tau2_u``/``tau2_v``/``tau2_omega``
    (three-level model) and ``tau2_tau`` (scale random effect).
    """

    beta_loc: np.ndarray = field(default_factory=lambda: np.zeros(0))
    beta_scale: np.ndarray | None = None
    var_components: Mapping[str, float] = field(default_factory=dict)
    T: np.ndarray | None = None
    nu: float | None = None
    skew: float | None = None
    weights: np.ndarray | None = None
    means: np.ndarray | None = None
    variances: np.ndarray | None = None
    beta_mu: float | None = None
    beta_tau2: float | None = None

    def __post_init__(self):
        for name in ("beta_loc", "beta_scale", "T", "weights", "means", "variances"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, np.asarray(val, dtype=float))
        object.__setattr__(self, "var_components",
                           {k: float(v) for k, v in dict(self.var_components).items()})

    @property
    def tau2(self) -> float:
        return self.var_components["tau2"]

    def beta_shape(self) -> tuple[float, float]:
        """Beta(a, b) shape pair implied by mean ``beta_mu`` and variance ``beta_tau2``."""
        mu, t2 = self.beta_mu, self.beta_tau2
        c = (mu * (1.0 - mu) - t2) / t2
        return mu * c, (1.0 - mu) * c


# --------------------------------------------------------------------------
# cached data structures


def _cache(bundle: ModelInput) -> dict:
    return bundle.__dict__.setdefault("_likelihood_cache", {})


def location_design(bundle: ModelInput) -> tuple[np.ndarray, tuple[str, ...]]:
    """Fixed-effect design for the location; one block per outcome for the
    multivariate family."""
    cache = _cache(bundle)
    if "loc_design" not in cache:
        X, names = bundle.X.values, bundle.X.column_names
        if bundle.family == "multivariate":
            outs = bundle.outcomes
            code = np.searchsorted(outs, bundle.table.outcome)
            p = X.shape[1]
            full = np.zeros((X.shape[0], p * len(outs)))
            for o in range(len(outs)):
                rows = code == o
                full[rows, o * p:(o + 1) * p] = X[rows]
            names = tuple(f"{out}:{nm}" for out in outs for nm in names)
            X = full
        cache["loc_design"] = (X, names)
    return cache["loc_design"]


@dataclass
class _Blocks:
    idx: np.ndarray        # (m, d) row indices
    labels: list           # block identifiers, for error messages
    pattern: np.ndarray    # multilevel: (d, d) shared-study indicator; multivariate: outcome codes


def _study_codes(bundle: ModelInput):
    cache = _cache(bundle)
    if "study_codes" not in cache:
        _, first, codes = np.unique(bundle.table.study, return_index=True, return_inverse=True)
        # number studies in order of first appearance
        order = np.argsort(first, kind="stable")
        rank = np.empty_like(order)
        rank[order] = np.arange(len(order))
        codes = rank[codes]
        sort = np.argsort(codes, kind="stable")
        starts = np.flatnonzero(np.r_[True, np.diff(codes[sort]) != 0])
        cache["study_codes"] = (codes, sort, starts, len(order))
    return cache["study_codes"]


def _multilevel_blocks(bundle: ModelInput) -> list[_Blocks]:
    cache = _cache(bundle)
    if "ml_blocks" in cache:
        return cache["ml_blocks"]
    t = bundle.table
    groups: dict = {}
    clusters = t.cluster.tolist()
    studies = t.study.tolist()
    members: dict = {}
    for i, c in enumerate(clusters):
        members.setdefault(c, []).append(i)
    for c, rows in members.items():
        rows = sorted(rows, key=lambda r: studies[r])
        ids = [studies[r] for r in rows]
        pattern = tuple(ids.index(s) for s in ids)
        groups.setdefault(pattern, ([], []))
        groups[pattern][0].append(rows)
        groups[pattern][1].append(c)
    blocks = []
    for pattern, (rows, labels) in groups.items():
        pat = np.array(pattern)
        B = (pat[:, None] == pat[None, :]).astype(float)
        blocks.append(_Blocks(np.array(rows, dtype=int), labels, B))
    cache["ml_blocks"] = blocks
    return blocks


def _multivariate_blocks(bundle: ModelInput) -> list[_Blocks]:
    cache = _cache(bundle)
    if "mv_blocks" in cache:
        return cache["mv_blocks"]
    t = bundle.table
    code = np.searchsorted(bundle.outcomes, t.outcome)
    members: dict = {}
    for i, s in enumerate(t.study.tolist()):
        members.setdefault(s, []).append(i)
    groups: dict = {}
    for s, rows in members.items():
        rows = sorted(rows, key=lambda r: code[r])
        pattern = tuple(int(code[r]) for r in rows)
        groups.setdefault(pattern, ([], []))
        groups[pattern][0].append(rows)
        groups[pattern][1].append(s)
    blocks = [_Blocks(np.array(rows, dtype=int), labels, np.array(pattern))
              for pattern, (rows, labels) in groups.items()]
    cache["mv_blocks"] = blocks
    return blocks


# --------------------------------------------------------------------------
# Gaussian families: whitening and profiling


@dataclass(frozen=True)
class Whitened:
    """``L^{-1} X``, ``L^{-1} y`` and ``log det V`` for the marginal covariance ``V = L L^T``."""

    X: np.ndarray
    y: np.ndarray
    logdet: float

    @property
    def n(self):
        return len(self.y)

    def loglik(self, beta) -> float:
        r = self.y - self.X @ beta
        return -0.5 * (self.n * LOG_2PI + self.logdet + r @ r)

    def gls(self):
        """Generalized least squares estimate and its covariance."""
        XtX = self.X.T @ self.X
        beta = np.linalg.lstsq(self.X, self.y, rcond=None)[0]
        return beta, np.linalg.inv(XtX)

    def reml(self) -> float:
        beta, _ = self.gls()
        p = self.X.shape[1]
        sign, logdet = np.linalg.slogdet(self.X.T @ self.X)
        if sign <= 0:
            raise LikelihoodError("X' V^-1 X is singular")
        return self.loglik(beta) - 0.5 * logdet + 0.5 * p * LOG_2PI


def _clamp(eta):
    return np.clip(eta, -ETA_CLAMP, ETA_CLAMP)


def _diag_variance(bundle: ModelInput, p: NaturalParams) -> np.ndarray:
    v = bundle.table.v
    if bundle.family == "location_scale":
        eta = bundle.Z.values @ p.beta_scale
        return v + np.exp(_clamp(eta))
    return v + p.var_components["tau2"]


def _whiten_blocks(blocks, X, y, build_V):
    Xs, ys, logdet = [], [], 0.0
    for blk in blocks:
        V = build_V(blk)
        try:
            L = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            for j, Vj in enumerate(V):
                try:
                    cholesky(Vj)
                except NotPositiveDefiniteError as err:
                    raise LikelihoodError(
                        f"marginal covariance not positive definite for {blk.labels[j]!r} "
                        f"(pivot {err.pivot})") from None
            raise
        Xb = X[blk.idx]
        yb = y[blk.idx][..., None]
        Xs.append(np.linalg.solve(L, Xb).reshape(-1, X.shape[1]))
        ys.append(np.linalg.solve(L, yb).reshape(-1))
        logdet += 2.0 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)))
    return Whitened(np.vstack(Xs), np.concatenate(ys), float(logdet))


def whiten(bundle: ModelInput, p: NaturalParams) -> Whitened:
    """Whitened regression problem for a Gaussian-marginal family."""
    fam = bundle.family
    X, _ = location_design(bundle)
    y = bundle.table.y
    v = bundle.table.v
    if fam in ("normal_re", "normal_metareg", "location_scale"):
        total = _diag_variance(bundle, p)
        w = 1.0 / np.sqrt(total)
        return Whitened(X * w[:, None], y * w, float(np.sum(np.log(total))))
    if fam == "multilevel3":
        vc = p.var_components
        tu, tv, tw = vc["tau2_u"], vc["tau2_v"], vc["tau2_omega"]

        def build(blk):
            d = blk.idx.shape[1]
            base = tw * np.eye(d) + tv * blk.pattern + tu * np.ones((d, d))
            V = np.broadcast_to(base, (len(blk.idx), d, d)).copy()
            V[:, np.arange(d), np.arange(d)] += v[blk.idx]
            return V

        return _whiten_blocks(_multilevel_blocks(bundle), X, y, build)
    if fam == "multivariate":
        rho = bundle.spec.sampling_cor
        T = p.T

        def build(blk):
            pat = blk.pattern
            sd = np.sqrt(v[blk.idx])
            S = rho * sd[:, :, None] * sd[:, None, :]
            d = len(pat)
            S[:, np.arange(d), np.arange(d)] = v[blk.idx]
            return S + T[np.ix_(pat, pat)]

        return _whiten_blocks(_multivariate_blocks(bundle), X, y, build)
    raise ValueError(f"{fam} has no Gaussian marginal likelihood")


def _finite(value, what):
    if not np.isfinite(value):
        raise LikelihoodError(f"non-finite {what} log-likelihood")
    return float(value)


def ll_normal(bundle: ModelInput, p: NaturalParams, method: str = "ml") -> float:
    """Random-effects / meta-regression marginal log-likelihood.

    With ``method="reml"`` the location coefficients are profiled out, so the
    ``beta_loc`` in ``p`` is ignored.
    """
    if p.var_components["tau2"] < 0:
        raise ValueError("tau2 must be nonnegative")
    return _gaussian(bundle, p, method, "normal")


def _gaussian(bundle, p, method, what):
    w = whiten(bundle, p)
    val = w.reml() if method == "reml" else w.loglik(p.beta_loc)
    return _finite(val, what)


def ll_location_scale(bundle: ModelInput, p: NaturalParams) -> float:
    """Location-scale log-likelihood with ``log tau_i^2 = z_i' gamma``.

    With a scale random effect (``tau2_tau`` in ``var_components`` and the
    spec flag on) each row is integrated over the random log-variance shift.
    """
    if not bundle.spec.scale_random_effect:
        return _gaussian(bundle, p, "ml", "location-scale")
    t = bundle.table
    mu = bundle.X.values @ p.beta_loc
    eta = _clamp(bundle.Z.values @ p.beta_scale)
    sd_tau = np.sqrt(p.var_components.get("tau2_tau", 0.0))
    rule = gauss_hermite(bundle.spec.nodes)
    total = t.v[:, None] + np.exp(_clamp(eta[:, None] + sd_tau * rule.nodes[None, :]))
    r2 = (t.y - mu)[:, None] ** 2
    logn = -0.5 * (LOG_2PI + np.log(total) + r2 / total)
    rows = log_sum_exp(np.log(rule.weights)[None, :] + logn, axis=1)
    return _finite(np.sum(rows), "location-scale")


def clamp_active(bundle: ModelInput, p: NaturalParams) -> bool:
    """Whether the log-variance predictor hit the overflow clamp."""
    if bundle.family != "location_scale":
        return False
    eta = bundle.Z.values @ p.beta_scale
    return bool(np.any(np.abs(eta) >= ETA_CLAMP))


def ll_multilevel3(bundle: ModelInput, p: NaturalParams, method: str = "ml") -> float:
    """Three-level model: cluster, study-within-cluster and effect-level variances."""
    return _gaussian(bundle, p, method, "multilevel")


def ll_multivariate(bundle: ModelInput, p: NaturalParams, method: str = "ml") -> float:
    """Multivariate model with imputed within-study correlations; studies
    missing an outcome contribute the marginal of the observed coordinates."""
    return _gaussian(bundle, p, method, "multivariate")


def between_study_cov(tau, rho) -> np.ndarray:
    """Bivariate between-study covariance from two SDs and a correlation."""
    t1, t2 = tau
    return np.array([[t1 * t1, rho * t1 * t2], [rho * t1 * t2, t2 * t2]])


# --------------------------------------------------------------------------
# one-dimensional Laplace-centred quadrature


def _gh_log_integral(h, mode, sd, nodes):
    """``log int exp(h(m)) dm`` per row with a Gauss-Hermite rule centred at
    ``mode`` and scaled by ``sd``; ``h`` maps a (rows, nodes) array to values."""
    rule = gauss_hermite(nodes)
    pts = mode[:, None] + sd[:, None] * rule.nodes[None, :]
    with np.errstate(divide="ignore"):
        logw = np.log(rule.weights)
    terms = logw[None, :] + h(pts) + 0.5 * rule.nodes[None, :] ** 2 + 0.5 * LOG_2PI
    return np.log(sd) + log_sum_exp(terms, axis=1)


def _grid_mode(h, lo, hi, n=801, rounds=3):
    """Mode and Laplace scale of ``exp(h)`` per row by repeated grid zooming.

    Uses only function values, so it is an independent check on the
    Newton-based mode finders.
    """
    rows = np.arange(len(lo))
    frac = np.linspace(0.0, 1.0, n)
    steps = []
    for _ in range(rounds):
        grid = lo[:, None] + (hi - lo)[:, None] * frac[None, :]
        j = np.argmax(h(grid), axis=1)
        mode = grid[rows, j]
        step = (hi - lo) / (n - 1)
        steps.append(step)
        lo, hi = mode - 2.0 * step, mode + 2.0 * step
    d = steps[1] if rounds > 1 else steps[0]
    hv = h(np.column_stack([mode - d, mode, mode + d]))
    curv = -(hv[:, 0] - 2.0 * hv[:, 1] + hv[:, 2]) / d ** 2
    sd = np.where(np.isfinite(curv) & (curv > 0), 1.0 / np.sqrt(np.abs(curv)), 1.0)
    return mode, sd


def _bracketed_mode(dh, m, a, b, tol):
    """Newton iterations for the root of ``dh`` safeguarded by bisection on the
    bracket ``[a, b]``; returns the mode and the curvature there."""
    for _ in range(MODE_MAX_ITER):
        g, c = dh(m)
        a = np.where(g > 0, np.maximum(a, m), a)
        b = np.where(g < 0, np.minimum(b, m), b)
        newton = m - g / c
        use_bisect = ~((c < 0) & (newton > a) & (newton < b))
        new = np.where(use_bisect, 0.5 * (a + b), newton)
        done = np.abs(new - m) <= tol
        m = new
        if np.all(done):
            break
    _, c = dh(m)
    return m, c


# --------------------------------------------------------------------------
# GLMMs with adaptive Gauss-Hermite quadrature


def _glmm_terms(bundle: ModelInput, kind: str):
    t = bundle.table
    cache = _cache(bundle)
    key = "glmm_const"
    if key not in cache:
        if kind == "binomial":
            y, n = t.events.astype(float), t.trials.astype(float)
            const = gammaln(n + 1) - gammaln(y + 1) - gammaln(n - y + 1)
            cache[key] = (y, n, const)
        else:
            y = t.count.astype(float)
            expo = np.ones_like(y) if t.exposure is None else t.exposure.astype(float)
            const = y * np.log(expo) - gammaln(y + 1)
            cache[key] = (y, expo, const)
    return cache[key]


def _glmm_row_terms(kind, y, size, eta):
    """Row log-likelihood, its eta-derivative and minus the second derivative."""
    if kind == "binomial":
        ll = y * eta - size * np.logaddexp(0.0, eta)
        prob = np.exp(-np.logaddexp(0.0, -eta))
        return ll, y - size * prob, size * prob * (1.0 - prob)
    mean = size * np.exp(eta)
    return y * eta - mean, y - mean, mean


def _glmm_loglik(bundle: ModelInput, p: NaturalParams, kind: str, adaptive=True, nodes=None):
    y, size, const = _glmm_terms(bundle, kind)
    codes, sort, starts, n_st = _study_codes(bundle)
    tau2 = p.var_components["tau2"]
    if tau2 < 0:
        raise ValueError("tau2 must be nonnegative")
    sd = np.sqrt(tau2)
    eta0 = bundle.X.values @ p.beta_loc
    y_s, size_s, eta_s, codes_s = y[sort], size[sort], eta0[sort], codes[sort]

    def per_study(values):
        return np.add.reduceat(values, starts, axis=0)

    def h_study(z):
        ll, _, _ = _glmm_row_terms(kind, y_s[:, None], size_s[:, None],
                                   eta_s[:, None] + sd * z[codes_s])
        return per_study(ll) - 0.5 * z * z

    def h(z):
        return h_study(z[:, None])[:, 0]

    mode = np.zeros(n_st)
    scale = np.ones(n_st)
    if adaptive and sd > 0:
        cur = h(mode)
        for _ in range(MODE_MAX_ITER):
            _, d1, w = _glmm_row_terms(kind, y_s, size_s, eta_s + sd * mode[codes_s])
            grad = sd * per_study(d1) - mode
            curv = sd * sd * per_study(w) + 1.0
            step = grad / curv
            # step halving keeps every update an ascent step
            new = mode + step
            val = h(new)
            bad = ~(val >= cur - 1e-12 * np.abs(cur))
            halvings = 0
            while np.any(bad) and halvings < 30:
                step = np.where(bad, 0.5 * step, step)
                new = mode + step
                val = h(new)
                bad = ~(val >= cur - 1e-12 * np.abs(cur))
                halvings += 1
            mode, cur = new, val
            if np.max(np.abs(step)) < MODE_TOL:
                break
        _, _, w = _glmm_row_terms(kind, y_s, size_s, eta_s + sd * mode[codes_s])
        curv = sd * sd * per_study(w) + 1.0
        scale = 1.0 / np.sqrt(curv)
        ok = np.isfinite(scale) & np.isfinite(mode)
        mode = np.where(ok, mode, 0.0)
        scale = np.where(ok, scale, 1.0)

    if not adaptive and sd > 0:
        lim = np.full(n_st, 40.0)
        mode, scale = _grid_mode(h_study, -lim, lim)
    total = np.sum(_gh_log_integral(h_study, mode, scale, nodes or bundle.spec.nodes))
    total += np.sum(const) - 0.5 * LOG_2PI * n_st
    return _finite(total, f"{kind} GLMM")


def ll_glmm_binomial(bundle: ModelInput, p: NaturalParams, adaptive: bool = True,
                     nodes: int | None = None) -> float:
    """Binomial-logit GLMM with a normal study random intercept."""
    return _glmm_loglik(bundle, p, "binomial", adaptive, nodes)


def ll_glmm_poisson(bundle: ModelInput, p: NaturalParams, adaptive: bool = True,
                    nodes: int | None = None) -> float:
    """Poisson-log GLMM with exposure offsets and a normal study random intercept."""
    return _glmm_loglik(bundle, p, "poisson", adaptive, nodes)


# --------------------------------------------------------------------------
# robust random-effect distributions


def t_scale(tau2: float, nu: float) -> float:
    """Scale of a t distribution with variance ``tau2`` and ``nu`` degrees of freedom."""
    return np.sqrt(tau2 * (nu - 2.0) / nu)


def _t_logconst(nu):
    return gammaln(0.5 * (nu + 1)) - gammaln(0.5 * nu) - 0.5 * np.log(nu * np.pi)


class _HeavyTailRE:
    """Log-density (and derivatives) of a possibly two-piece skewed t."""

    def __init__(self, loc, scale, nu, skew=1.0):
        self.loc, self.scale, self.nu, self.skew = loc, scale, nu, skew
        self.logc = (_t_logconst(nu) - np.log(scale)
                     + np.log(2.0 / (skew + 1.0 / skew)))

    def _std(self, m):
        d = m - self.loc
        c = np.where(d >= 0, 1.0 / (self.scale * self.skew), self.skew / self.scale)
        return d * c, c

    def logpdf(self, m):
        r, _ = self._std(m)
        return self.logc - 0.5 * (self.nu + 1) * np.log1p(r * r / self.nu)

    def derivs(self, m):
        r, c = self._std(m)
        nu = self.nu
        den = nu + r * r
        d1 = -(nu + 1) * r * c / den
        d2 = -(nu + 1) * c * c * (nu - r * r) / den ** 2
        return d1, d2


def _normal_re_integrand(y, v, re):
    loc = np.broadcast_to(re.loc, y.shape)
    grid_re = _HeavyTailRE(loc[:, None], re.scale, re.nu, re.skew)

    def h(m):
        return (-0.5 * (LOG_2PI + np.log(v)[:, None] + (y[:, None] - m) ** 2 / v[:, None])
                + grid_re.logpdf(m))
    return loc, h


def _kinked_panels(y, v, loc, mode, sd):
    # panel ends: the kink at loc, geometric rings around the mode (a t tail
    # can stretch far past the Laplace scale when v >> scale^2), and a range
    # outside which the sampling density alone is negligible
    sv = np.sqrt(v)
    lo = np.minimum(y - 40.0 * sv, mode - 40.0 * sd)
    hi = np.maximum(y + 40.0 * sv, mode + 40.0 * sd)
    reach = np.max(np.maximum(mode - lo, hi - mode) / sd)
    rings = RING_RATIO ** np.arange(int(np.ceil(np.log(max(reach, 1.0)) / np.log(RING_RATIO))))
    pts = [lo, hi, loc] + [mode + r * sd for r in rings] + [mode - r * sd for r in rings]
    return np.sort(np.clip(np.column_stack(pts), lo[:, None], hi[:, None]), axis=1)


def _adaptive_normal_integral(y, v, re, nodes):
    """``log int N(y; m, v) p_RE(m) dm`` per study.

    Composite Gauss-Legendre on rings around the integrand mode. Heavy t
    tails defeat a single Gauss-Hermite rule at small node counts, and the
    two-piece skew-t density has a kink at its location, which gets its own
    panel break.
    """
    loc, h = _normal_re_integrand(y, v, re)
    lo = np.minimum(loc, y)
    hi = np.maximum(loc, y)

    def dh(m):
        d1, d2 = re.derivs(m)
        return (y - m) / v + d1, -1.0 / v + d2

    # coarse grid finds the global mode when the integrand is bimodal
    grid_n = 33
    frac = np.linspace(0.0, 1.0, grid_n)
    grid = lo[:, None] + (hi - lo)[:, None] * frac[None, :]
    j = np.argmax(h(grid), axis=1)
    rows = np.arange(len(y))
    a = grid[rows, np.maximum(j - 1, 0)]
    b = grid[rows, np.minimum(j + 1, grid_n - 1)]
    tol = PANEL_MODE_TOL * np.maximum(hi - lo, np.sqrt(v))
    m, c = _bracketed_mode(dh, grid[rows, j], a, b, tol)
    sd = np.where(c < 0, 1.0 / np.sqrt(np.abs(c)), np.sqrt(v))
    return _panel_log_integral(h, _kinked_panels(y, v, loc, m, sd), nodes)


def _brute_normal_integral(y, v, re, nodes):
    # grid-located mode, then the composite rule (no derivatives involved)
    loc, h = _normal_re_integrand(y, v, re)
    sv = np.sqrt(v)
    lo = np.minimum(loc, y) - 10.0 * sv
    hi = np.maximum(loc, y) + 10.0 * sv
    m, sd = _grid_mode(h, lo, hi)
    return _panel_log_integral(h, _kinked_panels(y, v, loc, m, sd), nodes)


PROBIT_LIM = 9.0
RING_RATIO = 3.0


def _panel_log_integral(h, breaks, nodes):
    """Composite Gauss-Legendre: ``log int exp(h)`` over consecutive panels
    whose end points are the columns of ``breaks``."""
    rule = gauss_legendre_01(nodes)
    lo, width = breaks[:, :-1], np.diff(breaks, axis=1)
    pts = lo[:, :, None] + width[:, :, None] * rule.nodes[None, None, :]
    with np.errstate(divide="ignore"):
        logw = np.log(np.maximum(width, 0.0))[:, :, None] + np.log(rule.weights)[None, None, :]
    n = len(breaks)
    return log_sum_exp((logw + h(pts.reshape(n, -1)).reshape(pts.shape)).reshape(n, -1), axis=1)


def _beta_integral(y, v, a, b, nodes, adaptive=True):
    """``log int N(y; u, v) Beta(u; a, b) du`` per study.

    With ``u = Phi(t)`` both tails of the integrand decay like a Gaussian
    (a, b > 1) and the end-point behaviour of the beta density disappears.
    The range ``|t| <= 9`` is split at mode +/- 6 sd so the peak from the
    sampling density and the broad beta shoulder each get their own
    Gauss-Legendre panel.
    """
    lognorm = betaln(a, b)

    def h(t):
        yy, vv = y[:, None], v[:, None]
        u = ndtr(t)
        return ((a - 1.0) * log_ndtr(t) + (b - 1.0) * log_ndtr(-t) - 0.5 * (t * t + LOG_2PI)
                - lognorm - 0.5 * (LOG_2PI + np.log(vv) + (yy - u) ** 2 / vv))

    lim = np.full(len(y), PROBIT_LIM)
    if adaptive:
        def dh(t):
            u = ndtr(t)
            phi = np.exp(-0.5 * (t * t + LOG_2PI))
            lam_lo = np.exp(-0.5 * (t * t + LOG_2PI) - log_ndtr(t))
            lam_hi = np.exp(-0.5 * (t * t + LOG_2PI) - log_ndtr(-t))
            g = (a - 1.0) * lam_lo - (b - 1.0) * lam_hi - t + (y - u) * phi / v
            c = (-(a - 1.0) * lam_lo * (t + lam_lo) - (b - 1.0) * lam_hi * (lam_hi - t) - 1.0
                 + (-phi * phi - (y - u) * t * phi) / v)
            return g, c

        grid_n = 81
        grid = np.linspace(-PROBIT_LIM, PROBIT_LIM, grid_n)
        j = np.argmax(h(np.broadcast_to(grid, (len(y), grid_n))), axis=1)
        lo = grid[np.maximum(j - 1, 0)]
        hi = grid[np.minimum(j + 1, grid_n - 1)]
        mode, c = _bracketed_mode(dh, grid[j], lo, hi, PANEL_MODE_TOL)
        sd = np.where(c < 0, 1.0 / np.sqrt(np.abs(c)), 1.0)
    else:
        mode, sd = _grid_mode(h, -lim, lim)
    left = np.clip(mode - 6.0 * sd, -PROBIT_LIM, PROBIT_LIM)
    right = np.clip(mode + 6.0 * sd, -PROBIT_LIM, PROBIT_LIM)
    return _panel_log_integral(h, np.column_stack([-lim, left, right, lim]), nodes)


def check_shape(family: str, p: NaturalParams):
    if family in ("robust_t", "robust_skew_t"):
        if p.nu is None or not p.nu > 2:
            raise InvalidShapeError(f"degrees of freedom must exceed 2, got {p.nu}")
        if p.var_components.get("tau2", -1) < 0:
            raise InvalidShapeError("tau2 must be nonnegative")
    if family == "robust_skew_t" and (p.skew is None or not p.skew > 0):
        raise InvalidShapeError(f"skewness must be positive, got {p.skew}")
    if family == "robust_beta":
        mu, t2 = p.beta_mu, p.beta_tau2
        if mu is None or not 0 < mu < 1:
            raise InvalidShapeError(f"beta mean must lie in (0, 1), got {mu}")
        if t2 is None or not 0 < t2 < mu * (1 - mu):
            raise InvalidShapeError(f"beta variance must lie in (0, mu(1-mu)), got {t2}")
    if family == "robust_mixture":
        w = p.weights
        if w is None or np.any(w < 0) or abs(np.sum(w) - 1.0) > 1e-12:
            raise InvalidShapeError("mixture weights must be nonnegative and sum to 1")
        if np.any(p.variances < 0):
            raise InvalidShapeError("mixture variances must be nonnegative")


def ll_robust(bundle: ModelInput, p: NaturalParams, re_family: str | None = None,
              adaptive: bool = True, nodes: int | None = None) -> float:
    """Normal sampling with a t, skew-t, beta or normal-mixture random-effect
    distribution (one effect per study).

    ``adaptive=False`` switches to plain rules (the brute-force reference path).
    """
    re_family = re_family or bundle.family.replace("robust_", "")
    family = f"robust_{re_family}"
    check_shape(family, p)
    y, v = bundle.table.y, bundle.table.v
    if re_family == "mixture":
        total = p.variances[None, :] + v[:, None]
        with np.errstate(divide="ignore"):
            logw = np.log(p.weights)[None, :]
        comp = logw - 0.5 * (LOG_2PI + np.log(total) + (y[:, None] - p.means[None, :]) ** 2 / total)
        return _finite(np.sum(log_sum_exp(comp, axis=1)), "mixture")
    if re_family == "beta":
        a, b = p.beta_shape()
        rows = _beta_integral(y, v, a, b, nodes or (bundle.spec.nodes if adaptive else 201),
                              adaptive)
        return _finite(np.sum(rows), "beta random-effects")
    if re_family in ("t", "skew_t"):
        skew = 1.0 if re_family == "t" else p.skew
        loc = bundle.X.values @ p.beta_loc
        if not np.all(np.isfinite(loc)):
            raise LikelihoodError("non-finite random-effect location")
        scale = t_scale(p.var_components["tau2"], p.nu)
        if scale <= 0:
            # degenerate random effect: plain normal sampling around the location
            rows = -0.5 * (LOG_2PI + np.log(v) + (y - loc) ** 2 / v)
            return _finite(np.sum(rows), re_family)
        re = _HeavyTailRE(loc, scale, p.nu, skew)
        if adaptive:
            rows = _adaptive_normal_integral(y, v, re, nodes or bundle.spec.nodes)
        else:
            rows = _brute_normal_integral(y, v, re, nodes or 201)
        return _finite(np.sum(rows), f"{re_family} random-effects")
    raise ValueError(f"unknown robust random-effect family {re_family!r}")


# --------------------------------------------------------------------------
# dispatch


def loglik(bundle: ModelInput, p: NaturalParams, method: str | None = None) -> float:
    """Log-likelihood of ``bundle`` at ``p`` for the bundle's family."""
    fam = bundle.family
    method = method or bundle.spec.method
    if fam in ("normal_re", "normal_metareg"):
        return ll_normal(bundle, p, method)
    if fam == "location_scale":
        return ll_location_scale(bundle, p)
    if fam == "multilevel3":
        return ll_multilevel3(bundle, p, method)
    if fam == "multivariate":
        return ll_multivariate(bundle, p, method)
    if fam == "glmm_binomial":
        return ll_glmm_binomial(bundle, p)
    if fam == "glmm_poisson":
        return ll_glmm_poisson(bundle, p)
    return ll_robust(bundle, p)


def is_gaussian(bundle: ModelInput) -> bool:
    """True when the location coefficients can be profiled by GLS."""
    return bundle.family in GAUSSIAN_FAMILIES and not (
        bundle.family == "location_scale" and bundle.spec.scale_random_effect)

