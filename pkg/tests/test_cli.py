import csv
import io
import json
import math

import jsonschema
import numpy as np
import pytest

from distma import EffectTable, write_csv
from distma.cli import REPORT_FIELDS, dump_report, load_report, main, make_report
from distma.data_model import FAMILIES, load_csv
from distma.small_study import PER_META_HEADER, SUMMARY_HEADER

NUM = {"anyOf": [{"type": "number"}, {"enum": ["inf", "-inf", "nan"]}]}
NUM_OR_NULL = {"anyOf": [NUM, {"type": "null"}]}

COEF = {
    "type": "object",
    "required": ["name", "estimate", "se", "z", "p", "ci_low", "ci_high", "link"],
    "additionalProperties": False,
    "properties": {"name": {"type": "string"}, "estimate": NUM, "se": NUM_OR_NULL, "z": NUM_OR_NULL,
                   "p": {"anyOf": [{"type": "number", "minimum": 0, "maximum": 1}, {"type": "null"}]},
                   "ci_low": NUM_OR_NULL, "ci_high": NUM_OR_NULL, "link": {"type": "string"}},
}
FIT = {
    "type": "object",
    "required": ["family", "method", "loc_formula", "scale_formula", "n_obs", "n_params",
                 "coefficients", "loglik", "aic", "bic", "convergence", "warnings"],
    "additionalProperties": False,
    "properties": {
        "family": {"enum": list(FAMILIES)}, "method": {"enum": ["ml", "reml"]},
        "loc_formula": {"type": "string"}, "scale_formula": {"type": ["string", "null"]},
        "n_obs": {"type": "integer"}, "n_params": {"type": "integer"},
        "coefficients": {"type": "array", "items": COEF}, "loglik": NUM, "aic": NUM, "bic": NUM,
        "convergence": {"type": "object",
                        "required": ["converged", "iterations", "gradient_norm", "hessian_pd"],
                        "properties": {"converged": {"type": "boolean"},
                                       "iterations": {"type": "integer"},
                                       "gradient_norm": NUM, "hessian_pd": {"type": "boolean"}}},
        "warnings": {"type": "array", "items": {"type": "string"}},
    },
}
EGGER = {
    "type": "object",
    "required": ["slope", "slope_se", "t_stat", "df", "p", "intercept", "k"],
    "properties": {"slope": NUM, "slope_se": NUM, "t_stat": NUM, "df": {"type": "integer", "minimum": 1},
                   "p": {"type": "number", "minimum": 0, "maximum": 1}, "intercept": NUM,
                   "k": {"type": "integer", "minimum": 3}},
}
SLOPE = {"anyOf": [{"type": "null"}, {"type": "object", "required": ["estimate", "se", "z", "p"]}]}
SMALL = {
    "type": "object",
    "required": ["alpha", "egger", "loc_slope_test", "scale_slope_test", "flags", "converged", "fit",
                 "warnings"],
    "properties": {"egger": EGGER, "loc_slope_test": SLOPE, "scale_slope_test": SLOPE,
                   "flags": {"type": "object", "additionalProperties": {"type": "boolean"}},
                   "converged": {"type": "boolean"}, "fit": {"anyOf": [FIT, {"type": "null"}]}},
}


def report_schema(result):
    return {
        "type": "object",
        "required": list(REPORT_FIELDS),
        "additionalProperties": False,
        "properties": {
            "schema_version": {"type": "string"},
            "invocation": {"type": "object", "required": ["command"]},
            "result": result,
            "timing": {"type": "object", "required": ["wall_seconds"],
                       "properties": {"wall_seconds": {"type": "number", "minimum": 0}}},
        },
    }


BATCH_JSON = {
    "type": "object",
    "required": ["schema_version", "alpha", "min_k", "summary", "per_meta"],
    "properties": {
        "summary": {"type": "array", "items": {
            "type": "object", "required": ["metric", "count", "percent"],
            "properties": {"metric": {"type": "string"}, "count": {"type": "integer", "minimum": 0},
                           "percent": {"type": "string", "pattern": r"^\d+\.\d$"}}}},
        "per_meta": {"type": "array", "items": {
            "type": "object", "required": list(PER_META_HEADER),
            "properties": {"file": {"type": "string"}, "k": {"type": ["integer", "null"]},
                           "skipped_reason": {"type": "string"},
                           "converged": {"type": ["boolean", "null"]},
                           "egger_p": NUM_OR_NULL, "loc_p": NUM_OR_NULL, "scale_p": NUM_OR_NULL}}},
    },
}


def load_json(path, schema):
    text = path.read_text()
    doc = json.loads(text)
    jsonschema.validate(doc, schema)
    if "schema_version" in doc and "invocation" in doc:
        assert list(doc) == list(REPORT_FIELDS)
    return doc


def null_csv(path, k=12, seed=0):
    rng = np.random.default_rng(seed)
    se = rng.uniform(0.05, 0.5, k)
    y = 0.2 + rng.normal(size=k) * np.sqrt(se ** 2 + 0.02)
    write_csv(EffectTable.from_arrays(y=y, v=se ** 2), path)


def test_fit_reml_two_study(tmp_path):
    data = tmp_path / "two.csv"
    data.write_text("study,y,v\na,0,1\nb,2,1\n")
    out = tmp_path / "r.json"
    assert main(["fit", "--data", str(data), "--family", "normal_re", "--method", "reml",
                 "--out", str(out)]) == 0
    doc = load_json(out, report_schema(FIT))
    coefs = {c["name"]: c for c in doc["result"]["coefficients"]}
    assert coefs["beta[intercept]"]["estimate"] == pytest.approx(1.0, abs=1e-8)
    assert coefs["tau2"]["estimate"] == pytest.approx(1.0, abs=1e-6)
    assert doc["invocation"]["family"] == "normal_re"


def test_unknown_family(tmp_path, capsys):
    data = tmp_path / "two.csv"
    data.write_text("study,y,v\na,0,1\nb,2,1\n")
    assert main(["fit", "--data", str(data), "--family", "nosuch"]) == 1
    err = capsys.readouterr().err
    assert all(f in err for f in FAMILIES)


def test_input_errors_exit_1(tmp_path, capsys):
    data = tmp_path / "d.csv"
    null_csv(data)
    assert main(["fit", "--data", str(data), "--family", "normal_re", "--loc", "1 + nope"]) == 1
    assert main(["fit", "--data", str(tmp_path / "missing.csv"), "--family", "normal_re"]) == 1
    assert main(["fit", "--family", "normal_re"]) == 1
    assert main(["frobnicate"]) == 1
    small = tmp_path / "small.csv"
    small.write_text("y,v\n0.1,0.01\n0.3,0.02\n")
    assert main(["egger", "--data", str(small)]) == 1
    assert "k ≥ 3" in capsys.readouterr().err


def test_egger_and_small_study_reports(tmp_path):
    data = tmp_path / "d.csv"
    null_csv(data, k=15, seed=3)
    eo, so = tmp_path / "e.json", tmp_path / "s.json"
    assert main(["egger", "--data", str(data), "--out", str(eo)]) == 0
    load_json(eo, report_schema(EGGER))
    code = main(["small-study", "--data", str(data), "--out", str(so)])
    doc = load_json(so, report_schema(SMALL))
    assert code == (0 if doc["result"]["converged"] else 2)


def test_fit_location_scale_and_stdout(tmp_path, capsys):
    data = tmp_path / "ls.csv"
    assert main(["simulate", "--family", "location_scale", "--k", "80", "--seed", "4",
                 f"--gamma={math.log(0.05)},0", "--out", str(data)]) == 0
    code = main(["fit", "--data", str(data), "--family", "location_scale", "--loc", "1 + se",
                 "--scale", "1 + se"])
    doc = json.loads(capsys.readouterr().out)
    jsonschema.validate(doc, report_schema(FIT))
    assert code in (0, 2) and (code == 0) == doc["result"]["convergence"]["converged"]
    names = [c["name"] for c in doc["result"]["coefficients"]]
    assert "gamma[se]" in names


def test_batch_outputs(tmp_path):
    d = tmp_path / "metas"
    d.mkdir()
    for i in range(5):
        null_csv(d / f"m{i}.csv", seed=10 + i)
    prefix = tmp_path / "out"
    code = main(["batch", "--dir", str(d), "--out-prefix", str(prefix), "--workers", "1"])
    assert code in (0, 2)
    rows = list(csv.reader(io.StringIO((tmp_path / "out_summary.csv").read_text())))
    assert tuple(rows[0]) == SUMMARY_HEADER
    counts = {r[0]: int(r[1]) for r in rows[1:]}
    assert counts["n_total"] == 5
    for m in ("egger_positive", "ls_loc_positive", "ls_scale_positive"):
        assert counts[m] <= 5
    per = list(csv.reader(io.StringIO((tmp_path / "out_per_meta.csv").read_text())))
    assert tuple(per[0]) == PER_META_HEADER and len(per) == 6
    load_json(tmp_path / "out_summary.json", BATCH_JSON)
    assert main(["batch", "--dir", str(tmp_path / "none"), "--out-prefix", str(prefix)]) == 1


def test_batch_worker_bytes(tmp_path):
    d = tmp_path / "metas"
    d.mkdir()
    for i in range(4):
        null_csv(d / f"m{i}.csv", seed=20 + i)
    texts = []
    for w in ("1", "2"):
        main(["batch", "--dir", str(d), "--out-prefix", str(tmp_path / f"w{w}"), "--workers", w])
        texts.append((tmp_path / f"w{w}_summary.csv").read_bytes())
    assert texts[0] == texts[1]


@pytest.mark.parametrize("fam", FAMILIES)
def test_simulate_round_trip(tmp_path, fam):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    args = ["simulate", "--family", fam, "--k", "30", "--seed", "5"]
    assert main(args + ["--out", str(a)]) == 0
    assert main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    load_csv(a)
    loc = "1 + x1" if fam == "normal_metareg" else "1"
    code = main(["fit", "--data", str(a), "--family", fam, "--loc", loc, "--out", str(tmp_path / "f.json")])
    assert code in (0, 2)
    load_json(tmp_path / "f.json", report_schema(FIT))


def test_simulate_bad_truth(tmp_path):
    out = str(tmp_path / "x.csv")
    assert main(["simulate", "--family", "normal_re", "--k", "0", "--out", out]) == 1
    assert main(["simulate", "--family", "normal_re", "--k", "5", "--tau2", "-1", "--out", out]) == 1
    assert main(["simulate", "--family", "robust_t", "--k", "5", "--nu", "1.5", "--out", out]) == 1


def test_report_round_trip():
    rep = make_report("fit", {"data": "d.csv", "alpha": 0.05},
                      {"x": [1.5, None, "inf"], "nested": {"b": True}}, 0.25)
    text = dump_report(rep)
    assert load_report(text) == rep
    assert dump_report(load_report(text)) == text
    assert list(json.loads(text)) == list(REPORT_FIELDS)
