"""Small-study diagnostics: Egger's regression test, the joint location-scale
model with the standard error as moderator of both the effect and the
heterogeneity, and a batch runner over a directory of meta-analyses."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path

import numpy as np
from scipy import stats

from .data_model import DataError, EffectTable, ModelSpec, load_csv, validate
from .fit import FitError, FitResult, fit

logger = logging.getLogger(__name__)

EGGER_MIN_K = 3
LS_MIN_K = 5
SUMMARY_HEADER = ("metric", "count", "percent")
PER_META_HEADER = ("file", "k", "egger_p", "loc_beta", "loc_p", "scale_gamma", "scale_p",
                   "converged", "skipped_reason")
SCHEMA_VERSION = "1.0"


@dataclass(frozen=True)
class EggerResult:
    slope: float
    slope_se: float
    t_stat: float
    df: int
    p: float
    intercept: float
    k: int


def _one_per_study(table: EffectTable, what: str):
    if len(np.unique(table.study)) != table.n:
        raise DataError(f"{what} needs one effect per study")


def egger_test(table: EffectTable) -> EggerResult:
    """Egger's regression test: WLS of ``y`` on ``(1, se)`` with weights ``1/v``.

    The slope is tested with a t statistic on ``k - 2`` degrees of freedom.
    An exact linear fit is reported with ``t = +/-inf, p = 0`` (or ``t = 0,
    p = 1`` when the slope is exactly zero).
    """
    k = table.n
    if k < EGGER_MIN_K:
        raise DataError(f"Egger's test requires k ≥ {EGGER_MIN_K} (got k={k})")
    _one_per_study(table, "Egger's test")
    y, v = table.y, table.v
    if y is None or v is None or np.any(v <= 0):
        raise DataError("Egger's test needs effects with positive sampling variances")
    se = np.sqrt(v)
    if np.ptp(se) <= 1e-12 * np.max(se):
        raise DataError("no precision spread: all standard errors are equal")
    sw = 1.0 / se
    Xw = np.column_stack([sw, np.ones(k)])  # rows of (1, se) scaled by 1/se
    yw = y * sw
    Q, R = np.linalg.qr(Xw)
    coef = np.linalg.solve(R, Q.T @ yw)
    resid = yw - Xw @ coef
    df = k - 2
    rss = float(resid @ resid)
    Rinv = np.linalg.inv(R)
    unscaled = Rinv @ Rinv.T
    intercept, slope = float(coef[0]), float(coef[1])
    if rss <= (1e-13 * max(1.0, np.max(np.abs(yw)))) ** 2 * k:
        if slope == 0.0 or abs(slope) <= 1e-13 * max(1.0, np.max(np.abs(y))):
            return EggerResult(slope, 0.0, 0.0, df, 1.0, intercept, k)
        return EggerResult(slope, 0.0, float(np.copysign(np.inf, slope)), df, 0.0, intercept, k)
    slope_se = float(np.sqrt(rss / df * unscaled[1, 1]))
    t = slope / slope_se
    p = float(2.0 * stats.t.sf(abs(t), df))
    return EggerResult(slope, slope_se, float(t), df, p, intercept, k)


@dataclass(frozen=True)
class SlopeTest:
    estimate: float
    se: float | None
    z: float | None
    p: float | None


@dataclass
class SmallStudyResult:
    egger: EggerResult
    ls_fit: FitResult | None
    loc_slope_test: SlopeTest | None
    scale_slope_test: SlopeTest | None
    alpha: float
    flags: dict = field(default_factory=dict)
    converged: bool = False
    warnings: list = field(default_factory=list)


def _slope(fitres: FitResult, name: str) -> SlopeTest:
    row = fitres.coef(name)
    return SlopeTest(row.estimate, row.se, row.z, row.p)


def _positive(test: SlopeTest | None, alpha: float, ok: bool) -> bool:
    return bool(ok and test is not None and test.p is not None
                and test.p < alpha and test.estimate > 0)


def small_study_analysis(table: EffectTable, alpha: float = 0.05) -> SmallStudyResult:
    """Egger's test plus a location-scale model with ``se`` as the moderator of
    both the mean effect and the log between-study variance.

    Flags are set when the two-sided Wald p-value is below ``alpha`` and the
    slope is positive. A fit that fails or does not converge is kept with both
    LS flags false.
    """
    if not 0 < alpha < 1:
        raise DataError("alpha must lie in (0, 1)")
    if table.n < LS_MIN_K:
        raise DataError(f"small-study analysis requires k ≥ {LS_MIN_K} (got k={table.n})")
    _one_per_study(table, "small-study analysis")
    egger = egger_test(table)
    spec = ModelSpec(family="location_scale", loc_formula="1 + se", scale_formula="1 + se")
    bundle = validate(table, spec)
    warnings = []
    try:
        ls = fit(bundle)
    except FitError as exc:
        warnings.append(f"location-scale fit failed: {exc}")
        ls = None
    loc = scale = None
    converged = False
    if ls is not None:
        loc, scale = _slope(ls, "beta[se]"), _slope(ls, "gamma[se]")
        converged = ls.converged
        warnings.extend(ls.warnings)
    flags = {
        "egger_significant_positive": bool(egger.p < alpha and egger.slope > 0),
        "loc_significant_positive": _positive(loc, alpha, converged),
        "scale_significant_positive": _positive(scale, alpha, converged),
    }
    return SmallStudyResult(egger, ls, loc, scale, alpha, flags, converged, warnings)


# --------------------------------------------------------------------------
# batch runner


@dataclass(frozen=True)
class MetaRow:
    file: str
    k: int | None
    egger_p: float | None = None
    egger_slope: float | None = None
    loc_beta: float | None = None
    loc_p: float | None = None
    scale_gamma: float | None = None
    scale_p: float | None = None
    converged: bool | None = None
    skipped_reason: str = ""
    egger_positive: bool = False
    loc_positive: bool = False
    scale_positive: bool = False


@dataclass
class BatchSummary:
    n_total: int
    n_analyzed: int
    n_skipped: int
    egger_positive: tuple[int, str]
    ls_loc_positive: tuple[int, str]
    ls_scale_positive: tuple[int, str]
    ls_not_converged: tuple[int, str]
    alpha: float
    min_k: int
    per_meta: list[MetaRow]

    @property
    def any_not_converged(self) -> bool:
        return self.ls_not_converged[0] > 0


def percent(count: int, total: int) -> str:
    """``100 * count / total`` rounded half-up to one decimal, as text."""
    if total <= 0:
        return "0.0"
    value = Decimal(100 * count) / Decimal(total)
    return str(value.quantize(Decimal("0.1"), rounding=ROUND_HALF_UP))


def analyze_file(path: str, alpha: float, min_k: int) -> MetaRow:
    """Per-file work for the batch runner; never raises on bad input."""
    name = Path(path).name
    try:
        table = load_csv(path)
    except (DataError, OSError, UnicodeDecodeError) as exc:
        return MetaRow(name, None, skipped_reason=f"unreadable: {exc}")
    k = table.n
    if table.y is None:
        return MetaRow(name, k, skipped_reason="no effect-size column")
    if len(np.unique(table.study)) != k:
        return MetaRow(name, k, skipped_reason="multiple effects per study")
    if k < max(min_k, EGGER_MIN_K):
        return MetaRow(name, k, skipped_reason=f"k={k} below minimum {max(min_k, EGGER_MIN_K)}")
    try:
        res = small_study_analysis(table, alpha)
    except DataError as exc:
        return MetaRow(name, k, skipped_reason=str(exc))
    eg = res.egger
    loc, scale = res.loc_slope_test, res.scale_slope_test
    return MetaRow(
        file=name, k=k, egger_p=eg.p, egger_slope=eg.slope,
        loc_beta=None if loc is None else loc.estimate, loc_p=None if loc is None else loc.p,
        scale_gamma=None if scale is None else scale.estimate,
        scale_p=None if scale is None else scale.p, converged=res.converged,
        egger_positive=res.flags["egger_significant_positive"],
        loc_positive=res.flags["loc_significant_positive"],
        scale_positive=res.flags["scale_significant_positive"])


def _analyze_star(args):
    return analyze_file(*args)


def resolve_workers(workers: int | None) -> int:
    """Worker count after the ``DISTMA_THREADS`` cap."""
    n = workers if workers is not None else (os.cpu_count() or 1)
    cap = os.environ.get("DISTMA_THREADS")
    if cap:
        try:
            n = min(n, int(cap))
        except ValueError:
            raise DataError(f"DISTMA_THREADS must be an integer, got {cap!r}") from None
    return max(1, n)


def batch_run(directory, alpha: float = 0.05, min_k: int = LS_MIN_K,
              workers: int | None = 1) -> BatchSummary:
    """Run the small-study pipeline on every ``*.csv`` file in ``directory``.

    Files are processed in filename order; results do not depend on the
    number of worker processes.
    """
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"cannot read directory {directory}")
    if not 0 < alpha < 1:
        raise DataError("alpha must lie in (0, 1)")
    if min_k < LS_MIN_K:
        raise DataError(f"min_k must be at least {LS_MIN_K}")
    files = sorted((p for p in d.iterdir() if p.suffix.lower() == ".csv" and p.is_file()),
                   key=lambda p: p.name)
    if not files:
        raise DataError(f"no CSV files in {directory}")
    jobs = [(str(p), alpha, min_k) for p in files]
    n_workers = min(resolve_workers(workers), len(jobs))
    if n_workers == 1:
        rows = [_analyze_star(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(_analyze_star, jobs, chunksize=1))
    analyzed = [r for r in rows if not r.skipped_reason]
    n_an = len(analyzed)

    def tally(attr):
        c = sum(bool(getattr(r, attr)) for r in analyzed)
        return (c, percent(c, n_an))

    nc = sum(1 for r in analyzed if not r.converged)
    return BatchSummary(
        n_total=len(rows), n_analyzed=n_an, n_skipped=len(rows) - n_an,
        egger_positive=tally("egger_positive"), ls_loc_positive=tally("loc_positive"),
        ls_scale_positive=tally("scale_positive"), ls_not_converged=(nc, percent(nc, n_an)),
        alpha=alpha, min_k=min_k, per_meta=rows)


def _cell(x):
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def summary_rows(s: BatchSummary) -> list[tuple[str, int, str]]:
    return [
        ("n_total", s.n_total, percent(s.n_total, s.n_total)),
        ("n_analyzed", s.n_analyzed, percent(s.n_analyzed, s.n_total)),
        ("n_skipped", s.n_skipped, percent(s.n_skipped, s.n_total)),
        ("egger_positive", *s.egger_positive),
        ("ls_loc_positive", *s.ls_loc_positive),
        ("ls_scale_positive", *s.ls_scale_positive),
        ("ls_not_converged", *s.ls_not_converged),
    ]


def summary_csv(s: BatchSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_HEADER)
    w.writerows(summary_rows(s))
    return buf.getvalue()


def per_meta_csv(s: BatchSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PER_META_HEADER)
    for r in s.per_meta:
        w.writerow([_cell(getattr(r, c)) for c in PER_META_HEADER])
    return buf.getvalue()


def _json_float(x):
    if x is None or isinstance(x, bool) or not isinstance(x, float):
        return x
    if np.isfinite(x):
        return x
    return "inf" if x > 0 else ("-inf" if x < 0 else "nan")


def summary_json(s: BatchSummary) -> str:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "alpha": s.alpha,
        "min_k": s.min_k,
        "summary": [{"metric": m, "count": c, "percent": p} for m, c, p in summary_rows(s)],
        "per_meta": [{k: _json_float(v) for k, v in asdict(r).items()} for r in s.per_meta],
    }
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def write_batch(s: BatchSummary, prefix) -> list[Path]:
    prefix = str(prefix)
    out = []
    for suffix, text in (("_summary.csv", summary_csv(s)), ("_per_meta.csv", per_meta_csv(s)),
                         ("_summary.json", summary_json(s))):
        path = Path(prefix + suffix)
        path.write_text(text, encoding="utf-8")
        out.append(path)
    return out
