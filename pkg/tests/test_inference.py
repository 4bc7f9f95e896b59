import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import LL_FULL, LL_NULL, LL_RESTRICTED
from ebike_agents.inference import chi_square_sf, gamma_q, likelihood_ratio, lr_statistic, lr_test
from ebike_agents.ordlogit import ModelData, fit_ordered_logit, sample_ordered_logit

GRID = np.linspace(0.0, 50.0, 501)


def sf_closed_form(x, df):
    if df == 1:
        return math.erfc(math.sqrt(x / 2))
    if df == 2:
        return math.exp(-x / 2)
    if df == 3:
        return math.erfc(math.sqrt(x / 2)) + math.sqrt(2 * x / math.pi) * math.exp(-x / 2)
    raise ValueError(df)


@pytest.mark.parametrize("df", [1, 2, 3])
def test_chi_square_closed_forms(df):
    err = max(abs(chi_square_sf(x, df) - sf_closed_form(x, df)) for x in GRID)
    assert err <= 1e-10


def test_known_quantiles():
    assert chi_square_sf(3.841458820694124, 1) == pytest.approx(0.05, abs=1e-12)
    assert chi_square_sf(5.991464547107979, 2) == pytest.approx(0.05, abs=1e-12)
    assert chi_square_sf(0.0, 4) == 1.0


def test_against_scipy():
    stats = pytest.importorskip("scipy.stats")
    for df in range(1, 31):
        for x in (0.01, 0.5, 1.0, 3.0, 10.0, 25.0, 60.0, 150.0):
            assert chi_square_sf(x, df) == pytest.approx(stats.chi2.sf(x, df), rel=1e-9, abs=1e-300)


@given(st.floats(0.05, 40), st.floats(0, 80))
def test_gamma_q_in_unit_interval(a, x):
    q = gamma_q(a, x)
    assert 0.0 <= q <= 1.0


@given(st.integers(1, 20), st.floats(0, 60), st.floats(0, 5))
def test_sf_decreasing_in_x(df, x, dx):
    assert chi_square_sf(x + dx, df) <= chi_square_sf(x, df) + 1e-15


def test_domain_errors():
    with pytest.raises(ValueError):
        chi_square_sf(1.0, 0)
    with pytest.raises(ValueError):
        chi_square_sf(-1.0, 2)


def test_reference_lr_chain():
    lr = lr_statistic(LL_RESTRICTED, LL_FULL)
    assert lr == pytest.approx(19.162, abs=1e-3)
    assert chi_square_sf(lr, 3) == pytest.approx(2.5e-4, abs=0.2e-4)
    # df=2 cannot reproduce the reference p-value of 0.0003
    assert chi_square_sf(lr, 2) == pytest.approx(6.9e-5, abs=0.1e-5)
    result = likelihood_ratio(LL_RESTRICTED, LL_FULL, df=3)
    assert result.reject and result.df == 3
    assert round(result.p_value, 4) == 0.0003
    assert LL_NULL < LL_RESTRICTED < LL_FULL


def test_zero_lr_has_unit_p_value():
    r = likelihood_ratio(-10.0, -10.0, df=2)
    assert r.lr == 0.0 and r.p_value == 1.0 and not r.reject


def test_negative_lr_warns():
    with pytest.warns(RuntimeWarning, match="negative"):
        r = likelihood_ratio(-9.0, -10.0, df=1)
    assert r.warning and r.p_value == 1.0 and not r.reject


def test_alpha_none_never_rejects():
    assert not likelihood_ratio(-100.0, -50.0, df=1, alpha=None).reject


def test_lr_test_on_nested_fits():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(800, 3))
    y = sample_ordered_logit([-0.5, 0.7], [0.8, 0.0, -0.6], X, rng)
    full = fit_ordered_logit(ModelData(X, y, K=3, feature_names=("a", "b", "c")))
    restricted = fit_ordered_logit(ModelData(X[:, :1], y, K=3, feature_names=("a",)))
    result = lr_test(restricted, full)
    assert result.df == 2
    assert result.lr == pytest.approx(2 * (full.ll_model - restricted.ll_model))
    assert result.reject


def test_lr_test_refuses_non_nested():
    a = SimpleNamespace(n=10, K=3, feature_names=("a", "b"), n_params=4, ll_model=-5.0)
    b = SimpleNamespace(n=10, K=3, feature_names=("a", "c"), n_params=4, ll_model=-4.0)
    with pytest.raises(ValueError, match="nested"):
        lr_test(a, b)
    with pytest.raises(ValueError, match="samples"):
        lr_test(SimpleNamespace(**{**a.__dict__, "n": 9}), b)
