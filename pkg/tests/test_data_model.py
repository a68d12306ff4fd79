import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from distma import (DataError, EffectTable, Formula, ModelSpec, build_design, load_csv,
                    validate, write_csv)
from distma.data_model import FAMILIES, count_parameters


def _csv(tmp_path, text, name="d.csv"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


def test_load_se_converts_to_variance(tmp_path):
    t = load_csv(_csv(tmp_path, "y,se\n0.2,0.1\n0.3,0.2\n"))
    assert t.n == 2
    np.testing.assert_allclose(t.v, [0.01, 0.04], rtol=1e-15)
    assert t.variance_source == "se"
    assert t.k == 2


def test_categorical_level_inference(tmp_path):
    t = load_csv(_csv(tmp_path, "y,v,region\n0.1,0.1,EU\n0.2,0.1,US\n0.3,0.1,EU\n"))
    assert t.moderator_schema["region"].kind == "categorical"
    assert t.moderator_schema["region"].levels == ("EU", "US")


def test_zero_se_is_rejected(tmp_path):
    with pytest.raises(DataError, match="nonpositive sampling error"):
        load_csv(_csv(tmp_path, "y,se\n0.2,0.1\n0.3,0\n"))


@pytest.mark.parametrize("text,msg", [
    ("y\n0.1\n", "missing required column"),
    ("y,v\n0.1,abc\n", "non-numeric"),
    ("y,v\n0.1,-1\n", "nonpositive"),
    ("study,events,trials\na,6,5\n", "events > trials"),
    ("y,v,dose\n0.1,0.1,\n0.2,0.1,3\n", "missing value in moderator"),
    ("y,v,se\n0.1,0.1,0.3\n", "exactly one"),
    ("", "empty"),
    ("y,v\n", "no data rows"),
])
def test_load_errors(tmp_path, text, msg):
    with pytest.raises(DataError, match=msg):
        load_csv(_csv(tmp_path, text))


def test_overrides_map_headers(tmp_path):
    t = load_csv(_csv(tmp_path, "effect,var,trial\n0.1,0.2,A\n0.3,0.4,B\n"),
                 {"y": "effect", "v": "var", "study": "trial"})
    np.testing.assert_array_equal(t.y, [0.1, 0.3])
    assert t.study.tolist() == ["A", "B"]
    assert t.moderators == {}


def test_row_order_and_rows_view(tmp_path):
    t = load_csv(_csv(tmp_path, "study,y,v,x\nb,3,1,1\na,1,1,2\nc,2,1,3\n"))
    assert t.study.tolist() == ["b", "a", "c"]
    rows = t.rows
    assert rows[0].study_id == "b" and rows[0].moderators == {"x": 1.0}


def test_build_design_examples():
    t = EffectTable.from_arrays(y=[1, 2, 3], v=[1, 1, 1])
    d = build_design(t, Formula())
    assert d.values.shape == (3, 1) and np.all(d.values == 1)
    t = EffectTable.from_arrays(y=[1, 2, 3, 4], v=[1, 1, 1, 1],
                                moderators={"g": ["C", "A", "B", "A"]})
    d = build_design(t, Formula.parse("1 + g"))
    assert d.column_names == ("intercept", "g[B]", "g[C]")
    np.testing.assert_array_equal(d.values, [[1, 0, 1], [1, 0, 0], [1, 1, 0], [1, 0, 0]])
    t = EffectTable.from_arrays(y=[1, 2, 3], v=[1, 1, 1], moderators={"a": [1, 2, 4], "b": [1, 2, 4]})
    with pytest.raises(DataError, match=r"rank-deficient design: collinear columns \['b'\]"):
        build_design(t, Formula.parse("1 + a + b"))


def test_formula_parsing():
    assert Formula.parse("1 + a + b") == Formula(True, ("a", "b"))
    assert Formula.parse("y ~ -1 + a") == Formula(False, ("a",))
    assert Formula.parse("0 + a").intercept is False
    assert Formula.parse("") == Formula()
    assert str(Formula.parse("1 + a")) == "1 + a"
    with pytest.raises(DataError):
        Formula.parse("1 - a")
    with pytest.raises(DataError):
        Formula.parse("1 + log(a)")


def test_unknown_term_and_derived_terms():
    t = EffectTable.from_arrays(y=[1, 2, 3], se=[0.1, 0.2, 0.4])
    with pytest.raises(DataError, match="not a column"):
        build_design(t, Formula.parse("1 + dose"))
    d = build_design(t, Formula.parse("1 + se"))
    np.testing.assert_allclose(d.values[:, 1], [0.1, 0.2, 0.4])


@settings(max_examples=80, deadline=None)
@given(levels=st.lists(st.sampled_from("ABCDEFG"), min_size=3, max_size=40), intercept=st.booleans())
def test_dummy_expansion(levels, intercept):
    n = len(levels)
    t = EffectTable.from_arrays(y=np.arange(n, dtype=float), v=np.ones(n),
                                moderators={"g": levels})
    L = len(set(levels))
    if L == 1 or (not intercept and L < 2):
        return
    if L + intercept - 1 > n:
        return
    f = Formula(intercept, ("g",))
    d = build_design(t, f)
    dummies = d.values[:, 1:] if intercept else d.values
    assert dummies.shape[1] == L - 1
    assert np.all(dummies.sum(axis=1) <= 1)
    ref = sorted(set(levels))[0]
    ref_rows = np.array(levels) == ref
    assert np.all(dummies[ref_rows] == 0)
    d2 = build_design(t, f)
    assert d2.column_names == d.column_names and np.array_equal(d2.values, d.values)


_finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(data=st.lists(st.tuples(_finite, st.floats(1e-8, 1e4), _finite, st.sampled_from(["p", "q"])),
                     min_size=1, max_size=25),
       use_se=st.booleans())
def test_csv_round_trip(tmp_path_factory, data, use_se):
    y = [d[0] for d in data]
    s = [d[1] for d in data]
    x = [d[2] for d in data]
    g = [d[3] for d in data]
    kw = {"se": s} if use_se else {"v": s}
    t = EffectTable.from_arrays(y=y, **kw, study=[f"s{i}" for i in range(len(y))],
                                moderators={"x": x, "g": g})
    path = tmp_path_factory.mktemp("rt") / "t.csv"
    write_csv(t, path)
    t2 = load_csv(path)
    np.testing.assert_allclose(t2.y, t.y, rtol=1e-15, atol=0)
    np.testing.assert_allclose(t2.v, t.v, rtol=1e-14, atol=0)
    np.testing.assert_allclose(t2.moderators["x"], t.moderators["x"], rtol=1e-15, atol=0)
    assert t2.study.tolist() == t.study.tolist()
    assert t2.moderators["g"].tolist() == t.moderators["g"].tolist()
    path2 = path.with_name("t2.csv")
    write_csv(t2, path2)
    assert path2.read_text() == path.read_text()


def test_validate_examples():
    t1 = EffectTable.from_arrays(y=[0.1], v=[0.1])
    with pytest.raises(DataError, match="insufficient rows"):
        validate(t1, ModelSpec("normal_re"))
    t = EffectTable.from_arrays(y=[0.1, 0.2], v=[0.1, 0.1])
    with pytest.raises(DataError, match="events"):
        validate(t, ModelSpec("glmm_binomial"))
    rng = np.random.default_rng(1)
    t5 = EffectTable.from_arrays(y=rng.normal(size=5), se=rng.uniform(0.1, 0.5, 5))
    b = validate(t5, ModelSpec("location_scale", "1 + se", "1 + se"))
    assert b.X.shape == (5, 2) and b.Z.shape == (5, 2)


def test_validate_family_columns():
    t = EffectTable.from_arrays(y=[0.1, 0.2, 0.3], v=[0.1, 0.1, 0.1], study=["a", "a", "b"])
    with pytest.raises(DataError, match="cluster"):
        validate(t, ModelSpec("multilevel3"))
    with pytest.raises(DataError, match="outcome"):
        validate(t, ModelSpec("multivariate"))
    with pytest.raises(DataError, match="one effect per study"):
        validate(t, ModelSpec("robust_t"))
    t = EffectTable.from_arrays(y=[0.1, 0.2, 0.3, 0.4], v=[0.1] * 4, study=["a", "a", "b", "b"],
                                outcome=["o1", "o1", "o1", "o2"])
    with pytest.raises(DataError, match="duplicated outcome_id"):
        validate(t, ModelSpec("multivariate"))
    t = EffectTable.from_arrays(y=[0.1, 0.2, 0.3], v=[0.1] * 3, moderators={"x": [1, 2, 3]})
    with pytest.raises(DataError, match="intercept-only"):
        validate(t, ModelSpec("robust_beta", "1 + x"))


def test_binomial_counts_bernoulli_rows():
    t = EffectTable.from_arrays(study=["s"], events=[5], trials=[10])
    b = validate(t, ModelSpec("glmm_binomial"))
    assert b.n == 1


def test_model_spec_checks():
    with pytest.raises(DataError, match="valid families"):
        ModelSpec("nosuch")
    with pytest.raises(DataError, match="REML"):
        ModelSpec("glmm_poisson", method="reml")
    with pytest.raises(DataError):
        ModelSpec("normal_re", scale_formula="1 + se")
    with pytest.raises(DataError):
        ModelSpec("multivariate", sampling_cor=1.0)
    with pytest.raises(DataError):
        ModelSpec("robust_mixture", mixture_g=1)
    assert ModelSpec("normal_re").nodes == 21
    assert ModelSpec("robust_t").nodes == 35
    assert ModelSpec("location_scale").scale_formula == Formula()
    for fam in FAMILIES:
        assert count_parameters(ModelSpec(fam), 1, 1, 2) >= 2


def test_table_is_immutable():
    t = EffectTable.from_arrays(y=[1.0, 2.0], v=[1.0, 1.0])
    with pytest.raises(ValueError):
        t.y[0] = 5.0
