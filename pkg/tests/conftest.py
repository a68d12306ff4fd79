import numpy as np
import pytest

from distma import EffectTable, ModelSpec, validate


def make_bundle(family="normal_re", loc="1", **table_kw):
    spec_kw = table_kw.pop("spec", {})
    table = EffectTable.from_arrays(**table_kw)
    return validate(table, ModelSpec(family=family, loc_formula=loc, **spec_kw))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
