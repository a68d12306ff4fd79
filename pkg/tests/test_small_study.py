import json
import math

import numpy as np
import pytest
from scipy import stats

from distma import EffectTable, ModelSpec, NaturalParams, validate, write_csv
from distma.data_model import DataError
from distma.fit import fit
from distma.simulate import SimScenario, simulate
from distma.small_study import (PER_META_HEADER, SUMMARY_HEADER, batch_run, egger_test,
                                per_meta_csv, percent, resolve_workers, small_study_analysis,
                                summary_csv, summary_json, write_batch)


def null_meta(k, seed, beta1=0.0, gamma1=0.0, tau2=0.02):
    p = NaturalParams(beta_loc=[0.2, beta1], beta_scale=[math.log(tau2), gamma1])
    return simulate(SimScenario("location_scale", p, k, seed, se_range=(0.05, 0.5), moderator="se"))


def egger_oracle(y, v):
    """Weighted normal equations, coded independently of the QR solver."""
    w = 1.0 / v
    se = np.sqrt(v)
    sw, sx, sy = w.sum(), (w * se).sum(), (w * y).sum()
    sxx, sxy = (w * se * se).sum(), (w * se * y).sum()
    det = sw * sxx - sx * sx
    slope = (sw * sxy - sx * sy) / det
    icpt = (sxx * sy - sx * sxy) / det
    resid = y - icpt - slope * se
    k = len(y)
    s2 = (w * resid * resid).sum() / (k - 2)
    se_slope = math.sqrt(s2 * sw / det)
    t = slope / se_slope
    return slope, se_slope, t, 2 * stats.t.sf(abs(t), k - 2), icpt


def test_egger_exact_line():
    se = np.array([0.1, 0.2, 0.3])
    r = egger_test(EffectTable.from_arrays(y=0.1 + se, v=se ** 2))
    assert r.slope == pytest.approx(1.0, abs=1e-12)
    assert r.intercept == pytest.approx(0.1, abs=1e-12)
    assert r.p == 0.0 and r.t_stat == math.inf and r.df == 1


def test_egger_flat_line():
    r = egger_test(EffectTable.from_arrays(y=[0.4] * 4, v=[0.01, 0.04, 0.09, 0.16]))
    assert r.slope == pytest.approx(0.0, abs=1e-12)
    assert r.p == 1.0 and r.t_stat == 0.0


def test_egger_errors():
    with pytest.raises(DataError, match="k"):
        egger_test(EffectTable.from_arrays(y=[0.1, 0.2], v=[0.01, 0.02]))
    with pytest.raises(DataError, match="no precision spread"):
        egger_test(EffectTable.from_arrays(y=[0.1, 0.2, 0.5], v=[0.02] * 3))
    with pytest.raises(DataError):
        egger_test(EffectTable.from_arrays(y=[0.1, 0.2, 0.5], v=[0.01, 0.02, 0.03], study=["a", "a", "b"]))


def test_egger_matches_normal_equations():
    rng = np.random.default_rng(4)
    for _ in range(50):
        k = int(rng.integers(3, 51))
        se = rng.uniform(0.05, 0.6, k)
        y = rng.normal(0.2 + 0.8 * se, se)
        r = egger_test(EffectTable.from_arrays(y=y, v=se ** 2))
        slope, s_se, t, p, icpt = egger_oracle(y, se ** 2)
        assert r.slope == pytest.approx(slope, abs=1e-10)
        assert r.slope_se == pytest.approx(s_se, abs=1e-10)
        assert r.t_stat == pytest.approx(t, abs=1e-10)
        assert r.p == pytest.approx(p, abs=1e-10)
        assert r.intercept == pytest.approx(icpt, abs=1e-10)
        assert r.df == k - 2 and 0 <= r.p <= 1


def test_egger_classical_equivalence():
    rng = np.random.default_rng(5)
    for _ in range(30):
        k = int(rng.integers(4, 40))
        se = rng.uniform(0.05, 0.6, k)
        y = rng.normal(0.1, se)
        r = egger_test(EffectTable.from_arrays(y=y, v=se ** 2))
        # standardized effect on precision, ordinary least squares, test the intercept
        X = np.column_stack([np.ones(k), 1.0 / se])
        z = y / se
        coef, *_ = np.linalg.lstsq(X, z, rcond=None)
        resid = z - X @ coef
        cov = resid @ resid / (k - 2) * np.linalg.inv(X.T @ X)
        assert r.t_stat == pytest.approx(coef[0] / math.sqrt(cov[0, 0]), abs=1e-10)


def test_small_study_requirements():
    with pytest.raises(DataError, match="k"):
        small_study_analysis(null_meta(4, 1))
    with pytest.raises(DataError):
        small_study_analysis(null_meta(10, 1), alpha=1.5)


def test_small_study_flags_consistent():
    for seed in range(5):
        r = small_study_analysis(null_meta(30, seed, beta1=1.0))
        for key, test in (("loc_significant_positive", r.loc_slope_test),
                          ("scale_significant_positive", r.scale_slope_test)):
            expect = r.converged and test.p is not None and test.p < 0.05 and test.estimate > 0
            assert r.flags[key] == expect
        assert r.flags["egger_significant_positive"] == (r.egger.p < 0.05 and r.egger.slope > 0)


def test_small_study_null_and_power():
    # same null scenario as the Type-I acceptance check (k = 10)
    null_flags = [small_study_analysis(null_meta(10, 100 + s)).flags for s in range(100)]
    quiet = [not f["loc_significant_positive"] and not f["scale_significant_positive"] for f in null_flags]
    assert np.mean(quiet) >= 0.9
    power = [small_study_analysis(null_meta(100, 500 + s, beta1=1.5)).flags["loc_significant_positive"]
             for s in range(30)]
    assert np.mean(power) > 0.5


def test_ls_nests_metaregression():
    for seed in range(10):
        t = null_meta(40, 900 + seed)
        ls = small_study_analysis(t).ls_fit
        re = fit(validate(t, ModelSpec("normal_metareg", loc_formula="1 + se")))
        assert ls.loglik >= re.loglik - 1e-8
        assert ls.loglik - re.loglik < 5.0


def test_percent_formatting():
    assert percent(8766, 67393) == "13.0"
    assert percent(6897, 67393) == "10.2"
    assert percent(1519, 67393) == "2.3"
    assert percent(1, 8) == "12.5" and percent(1, 16) == "6.3"
    assert percent(3, 0) == "0.0"


def write_corpus(d, n, k=10, seed0=0, bad=()):
    for i in range(n):
        write_csv(null_meta(k, seed0 + i), d / f"meta_{i:03d}.csv")
    for name in bad:
        (d / name).write_text("y,v\n1,notanumber\n")


def test_batch_skip_accounting(tmp_path):
    write_corpus(tmp_path, 4, bad=["broken.csv"])
    s = batch_run(tmp_path)
    assert (s.n_total, s.n_analyzed, s.n_skipped) == (5, 4, 1)
    skipped = [r for r in s.per_meta if r.skipped_reason]
    assert [r.file for r in skipped] == ["broken.csv"] and skipped[0].skipped_reason
    assert [r.file for r in s.per_meta] == sorted(r.file for r in s.per_meta)


def test_batch_small_files_skipped(tmp_path):
    write_corpus(tmp_path, 2)
    write_csv(null_meta(4, 77), tmp_path / "tiny.csv")
    s = batch_run(tmp_path)
    assert s.n_skipped == 1
    assert "below minimum" in [r for r in s.per_meta if r.file == "tiny.csv"][0].skipped_reason


def test_batch_null_counts_and_outputs(tmp_path):
    write_corpus(tmp_path, 10, seed0=300)
    s = batch_run(tmp_path)
    for c, pct in (s.egger_positive, s.ls_loc_positive, s.ls_scale_positive):
        assert c <= 3 and pct == percent(c, 10)
    lines = summary_csv(s).splitlines()
    assert lines[0] == ",".join(SUMMARY_HEADER)
    assert [ln.split(",")[0] for ln in lines[1:]] == [
        "n_total", "n_analyzed", "n_skipped", "egger_positive", "ls_loc_positive",
        "ls_scale_positive", "ls_not_converged"]
    assert per_meta_csv(s).splitlines()[0] == ",".join(PER_META_HEADER)
    doc = json.loads(summary_json(s))
    assert doc["summary"][1] == {"metric": "n_analyzed", "count": 10, "percent": "100.0"}
    assert len(doc["per_meta"]) == 10
    paths = write_batch(s, tmp_path / "out")
    assert [p.name for p in paths] == ["out_summary.csv", "out_per_meta.csv", "out_summary.json"]


def test_batch_alpha_monotone(tmp_path):
    write_corpus(tmp_path, 12, k=15, seed0=40)
    counts = []
    for alpha in (0.2, 0.1, 0.05, 0.01):
        s = batch_run(tmp_path, alpha=alpha)
        counts.append((s.egger_positive[0], s.ls_loc_positive[0], s.ls_scale_positive[0]))
    for hi, lo in zip(counts, counts[1:]):
        assert all(a >= b for a, b in zip(hi, lo))


def test_batch_workers_identical(tmp_path):
    write_corpus(tmp_path, 6, bad=["zz.csv"])
    ref = summary_json(batch_run(tmp_path, workers=1))
    assert summary_json(batch_run(tmp_path, workers=3)) == ref


def test_batch_errors(tmp_path):
    with pytest.raises(DataError):
        batch_run(tmp_path)
    with pytest.raises(DataError):
        batch_run(tmp_path / "nope")
    write_corpus(tmp_path, 1)
    with pytest.raises(DataError):
        batch_run(tmp_path, min_k=3)


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("DISTMA_THREADS", "2")
    assert resolve_workers(8) == 2
    monkeypatch.setenv("DISTMA_THREADS", "x")
    with pytest.raises(DataError):
        resolve_workers(8)
