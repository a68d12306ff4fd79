"""Deterministic data generators for every model family.

Random streams come from the Philox4x64-10 counter-based generator
(``numpy.random.Philox``). A scenario with seed ``s`` uses the 128-bit key
``s + (stream << 64)``; stream 0 generates the table and parallel work
derives independent substreams by incrementing ``stream``. The same key
always yields the same bit stream regardless of platform.

Draw order within a table is fixed: sampling variances, moderators, random
effects (outer levels first), then sampling errors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .data_model import DataError, EffectTable
from .likelihood import NaturalParams, t_scale

MASK64 = (1 << 64) - 1


def rng_for(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator keyed by ``(seed, stream)``."""
    if seed < 0 or stream < 0:
        raise ValueError("seed and stream must be nonnegative")
    return np.random.Generator(np.random.Philox(key=(seed & MASK64) | ((stream & MASK64) << 64)))


@dataclass(frozen=True)
class SimScenario:
    """What to simulate.

    ``params`` holds the true parameters. Sampling variances are drawn from
    ``v_range`` (uniform on the variance scale) unless ``se_range`` is given
    (uniform on the standard-error scale) or ``v_list`` fixes them. With
    ``moderator="se"`` the standard error is the single non-intercept column
    of the location (and scale) design; otherwise extra location coefficients
    multiply generated ``x1, x2, ...`` columns drawn from U(-1, 1).
    """

    family: str
    params: NaturalParams
    k: int
    seed: int = 0
    n_per_study: int = 1
    studies_per_cluster: int = 1
    v_range: tuple[float, float] = (0.01, 0.1)
    se_range: tuple[float, float] | None = None
    v_list: tuple[float, ...] | None = None
    moderator: str = "x"
    sampling_cor: float = 0.5
    missing_prob: float = 0.0
    trials_range: tuple[int, int] = (20, 100)
    exposure_range: tuple[float, float] = (1.0, 10.0)
    scale_random_effect: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.k < 1:
            raise DataError("k must be at least 1")
        if self.v_list is None and self.se_range is None and not 0 < self.v_range[0] <= self.v_range[1]:
            raise DataError("v_range must satisfy 0 < v_lo <= v_hi")
        if self.se_range is not None and not 0 < self.se_range[0] <= self.se_range[1]:
            raise DataError("se_range must satisfy 0 < se_lo <= se_hi")


def _variances(sc: SimScenario, rng, n):
    if sc.v_list is not None:
        v = np.resize(np.asarray(sc.v_list, dtype=float), n)
        if np.any(v <= 0):
            raise DataError("sampling variances must be positive")
        return v
    if sc.se_range is not None:
        return rng.uniform(*sc.se_range, size=n) ** 2
    return rng.uniform(*sc.v_range, size=n)


def _design(sc: SimScenario, rng, n, v, n_coef):
    """Location design (intercept first) and the moderator columns."""
    if n_coef <= 1:
        return np.ones((n, 1)), {}
    if sc.moderator == "se":
        if n_coef != 2:
            raise DataError("moderator='se' supports exactly two location coefficients")
        return np.column_stack([np.ones(n), np.sqrt(v)]), {}
    cols = {f"x{j}": rng.uniform(-1.0, 1.0, size=n) for j in range(1, n_coef)}
    return np.column_stack([np.ones(n)] + list(cols.values())), cols


def _ids(prefix, count):
    return np.array([f"{prefix}{i + 1}" for i in range(count)])


def sim_normal_re(sc: SimScenario) -> EffectTable:
    """Random-effects (meta-regression) data: ``y = x'beta + u + e``."""
    rng = rng_for(sc.seed)
    p = sc.params
    n = sc.k
    v = _variances(sc, rng, n)
    X, mods = _design(sc, rng, n, v, len(p.beta_loc))
    u = rng.normal(0.0, np.sqrt(p.tau2), size=n)
    y = X @ p.beta_loc + u + rng.normal(size=n) * np.sqrt(v)
    return EffectTable.from_arrays(y=y, v=v, study=_ids("s", n), moderators=mods)


def sim_location_scale(sc: SimScenario) -> EffectTable:
    """Location-scale data with ``log tau_i^2 = z_i' gamma`` (plus an optional
    normal random shift with variance ``tau2_tau``)."""
    rng = rng_for(sc.seed)
    p = sc.params
    n = sc.k
    v = _variances(sc, rng, n)
    X, mods = _design(sc, rng, n, v, len(p.beta_loc))
    if sc.moderator == "se":
        Z = np.column_stack([np.ones(n), np.sqrt(v)])[:, :len(p.beta_scale)]
    else:
        Z = X[:, :len(p.beta_scale)]
    eta = Z @ p.beta_scale
    if sc.scale_random_effect:
        eta = eta + rng.normal(size=n) * np.sqrt(p.var_components.get("tau2_tau", 0.0))
    u = rng.normal(size=n) * np.sqrt(np.exp(eta))
    y = X @ p.beta_loc + u + rng.normal(size=n) * np.sqrt(v)
    return EffectTable.from_arrays(y=y, v=v, study=_ids("s", n), moderators=mods)


def sim_multilevel3(sc: SimScenario) -> EffectTable:
    """Three-level data: ``k`` studies in clusters of ``studies_per_cluster``,
    ``n_per_study`` effects each."""
    rng = rng_for(sc.seed)
    p = sc.params
    vc = p.var_components
    per = sc.n_per_study
    n = sc.k * per
    v = _variances(sc, rng, n)
    X, mods = _design(sc, rng, n, v, len(p.beta_loc))
    study_code = np.repeat(np.arange(sc.k), per)
    cluster_code = study_code // max(1, sc.studies_per_cluster)
    n_cl = int(cluster_code.max()) + 1
    u = rng.normal(size=n_cl) * np.sqrt(vc["tau2_u"])
    s = rng.normal(size=sc.k) * np.sqrt(vc["tau2_v"])
    w = rng.normal(size=n) * np.sqrt(vc["tau2_omega"])
    y = X @ p.beta_loc + u[cluster_code] + s[study_code] + w + rng.normal(size=n) * np.sqrt(v)
    return EffectTable.from_arrays(
        y=y, v=v, study=_ids("s", sc.k)[study_code], cluster=_ids("c", n_cl)[cluster_code],
        moderators=mods)


def sim_multivariate(sc: SimScenario) -> EffectTable:
    """Correlated multi-outcome data; ``params.T`` is the between-study
    covariance and ``sampling_cor`` the true within-study correlation."""
    rng = rng_for(sc.seed)
    p = sc.params
    T = np.asarray(p.T, dtype=float)
    n_out = len(T)
    if len(p.beta_loc) != n_out:
        raise DataError("multivariate simulation expects one intercept per outcome")
    n = sc.k * n_out
    v = _variances(sc, rng, n).reshape(sc.k, n_out)
    u = rng.multivariate_normal(np.zeros(n_out), T, size=sc.k, method="cholesky")
    sd = np.sqrt(v)
    y = np.empty_like(v)
    for i in range(sc.k):
        S = sc.sampling_cor * np.outer(sd[i], sd[i])
        np.fill_diagonal(S, v[i])
        y[i] = p.beta_loc + u[i] + np.linalg.cholesky(S) @ rng.normal(size=n_out)
    keep = np.ones_like(v, dtype=bool)
    if sc.missing_prob > 0:
        keep = rng.uniform(size=v.shape) >= sc.missing_prob
        keep[~keep.any(axis=1), 0] = True
    study = np.repeat(_ids("s", sc.k), n_out).reshape(sc.k, n_out)
    outcome = np.tile(_ids("o", n_out), sc.k).reshape(sc.k, n_out)
    return EffectTable.from_arrays(y=y[keep], v=v[keep], study=study[keep], outcome=outcome[keep])


def sim_glmm(sc: SimScenario, kind: str = "binomial") -> EffectTable:
    """Binomial-logit or Poisson-log GLMM data with a normal study intercept."""
    if kind not in ("binomial", "poisson"):
        raise DataError(f"unknown GLMM kind {kind!r}")
    rng = rng_for(sc.seed)
    p = sc.params
    per = sc.n_per_study
    n = sc.k * per
    study_code = np.repeat(np.arange(sc.k), per)
    X, mods = _design(replace(sc, moderator="x"), rng, n, None, len(p.beta_loc))
    u = rng.normal(size=sc.k) * np.sqrt(p.tau2)
    eta = X @ p.beta_loc + u[study_code]
    study = _ids("s", sc.k)[study_code]
    if kind == "binomial":
        lo, hi = sc.trials_range
        trials = rng.integers(lo, hi + 1, size=n)
        events = rng.binomial(trials, 1.0 / (1.0 + np.exp(-eta)))
        return EffectTable.from_arrays(study=study, events=events, trials=trials, moderators=mods)
    exposure = rng.uniform(*sc.exposure_range, size=n)
    count = rng.poisson(exposure * np.exp(eta))
    return EffectTable.from_arrays(study=study, count=count, exposure=exposure, moderators=mods)


def draw_robust_effects(re_family: str, p: NaturalParams, rng, n, loc=None) -> np.ndarray:
    """True study effects from a t, skew-t, beta or normal-mixture distribution."""
    if re_family in ("t", "skew_t"):
        scale = t_scale(p.tau2, p.nu)
        t = rng.standard_t(p.nu, size=n)
        if re_family == "skew_t":
            g = p.skew
            right = rng.uniform(size=n) < g * g / (1.0 + g * g)
            t = np.where(right, g * np.abs(t), -np.abs(t) / g)
        return loc + scale * t
    if re_family == "beta":
        a, b = p.beta_shape()
        return rng.beta(a, b, size=n)
    if re_family == "mixture":
        labels = rng.choice(len(p.weights), size=n, p=p.weights)
        return p.means[labels] + rng.normal(size=n) * np.sqrt(p.variances[labels])
    raise DataError(f"unknown robust family {re_family!r}")


def sim_robust(sc: SimScenario, re_family: str | None = None) -> EffectTable:
    """Normal sampling around robust random effects (one effect per study)."""
    re_family = re_family or sc.family.replace("robust_", "")
    rng = rng_for(sc.seed)
    p = sc.params
    n = sc.k
    v = _variances(sc, rng, n)
    mods = {}
    loc = None
    if re_family in ("t", "skew_t"):
        if not p.nu > 2:
            raise DataError("nu must exceed 2")
        X, mods = _design(sc, rng, n, v, len(p.beta_loc))
        loc = X @ p.beta_loc
    elif re_family == "beta":
        a, b = p.beta_shape()
        if not (a > 1 and b > 1):
            raise DataError("beta random effects need both shapes above 1")
    theta = draw_robust_effects(re_family, p, rng, n, loc)
    y = theta + rng.normal(size=n) * np.sqrt(v)
    return EffectTable.from_arrays(y=y, v=v, study=_ids("s", n), moderators=mods)


def simulate(sc: SimScenario) -> EffectTable:
    fam = sc.family
    if fam in ("normal_re", "normal_metareg"):
        return sim_normal_re(sc)
    if fam == "location_scale":
        return sim_location_scale(sc)
    if fam == "multilevel3":
        return sim_multilevel3(sc)
    if fam == "multivariate":
        return sim_multivariate(sc)
    if fam == "glmm_binomial":
        return sim_glmm(sc, "binomial")
    if fam == "glmm_poisson":
        return sim_glmm(sc, "poisson")
    if fam.startswith("robust_"):
        return sim_robust(sc)
    raise DataError(f"unknown family {fam!r}")


def standard_scenarios(k: int = 100, seed: int = 0) -> dict[str, SimScenario]:
    """Reference scenarios used by the test and acceptance suites."""
    NP = NaturalParams
    return {
        "normal_re": SimScenario("normal_re", NP(beta_loc=[0.3], var_components={"tau2": 0.05}),
                                 k, seed),
        "normal_metareg": SimScenario(
            "normal_metareg", NP(beta_loc=[0.2, 0.5], var_components={"tau2": 0.04}), k, seed),
        "location_scale": SimScenario(
            "location_scale", NP(beta_loc=[0.1, 0.5], beta_scale=[np.log(0.05), 2.0]), k, seed,
            se_range=(0.05, 0.5), moderator="se"),
        "multilevel3": SimScenario(
            "multilevel3", NP(beta_loc=[0.4], var_components={
                "tau2_u": 0.04, "tau2_v": 0.03, "tau2_omega": 0.02}),
            k, seed, n_per_study=2, studies_per_cluster=3),
        "multivariate": SimScenario(
            "multivariate", NP(beta_loc=[0.2, 0.5], T=np.array([[0.04, 0.024], [0.024, 0.09]])),
            k, seed, sampling_cor=0.5),
        "glmm_binomial": SimScenario(
            "glmm_binomial", NP(beta_loc=[-0.5], var_components={"tau2": 0.2}), k, seed,
            trials_range=(10, 40)),
        "glmm_poisson": SimScenario(
            "glmm_poisson", NP(beta_loc=[0.5], var_components={"tau2": 0.2}), k, seed,
            exposure_range=(1.0, 5.0)),
        "robust_t": SimScenario(
            "robust_t", NP(beta_loc=[0.3], var_components={"tau2": 0.05}, nu=5.0), k, seed),
        "robust_skew_t": SimScenario(
            "robust_skew_t", NP(beta_loc=[0.3], var_components={"tau2": 0.05}, nu=6.0, skew=1.5),
            k, seed),
        "robust_beta": SimScenario(
            "robust_beta", NP(beta_mu=0.3, beta_tau2=0.01), k, seed, v_range=(0.005, 0.02)),
        "robust_mixture": SimScenario(
            "robust_mixture", NP(weights=[0.4, 0.6], means=[-1.0, 1.0], variances=[0.05, 0.05]),
            k, seed, v_range=(0.01, 0.05)),
    }
