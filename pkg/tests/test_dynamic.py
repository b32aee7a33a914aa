import dataclasses

import numpy as np
import pytest
from numpy.polynomial import legendre

from scinterf.dynamic import TrendSpec, estimate_dynamic_effects, fit_trend, trend_basis
from scinterf.errors import StepError, ValidationError
from scinterf.estimator import estimate_average_effects
from scinterf.factor import FactorFit
from scinterf.simulation import LOADINGS, SimConfig, effect_matrix

from conftest import make_panel, sim


def test_parse():
    assert TrendSpec.parse("poly:1") == TrendSpec("poly", 1)
    assert TrendSpec.parse("sieve:8") == TrendSpec("sieve", 8)
    assert TrendSpec.parse("sieve:8:3") == TrendSpec("sieve", 8, 3.0)
    assert TrendSpec.parse("sieve") == TrendSpec("sieve")
    for bad in ("poly", "spline:3", "sieve:x", "poly:-1"):
        with pytest.raises(ValidationError):
            TrendSpec.parse(bad)


def test_rates_and_sizes():
    assert TrendSpec("poly", 2).rate() == 0.5
    assert TrendSpec("sieve", smoothness=2.0).rate() == pytest.approx(1 / 3)
    assert TrendSpec("sieve", smoothness=3.0).rate() == pytest.approx(0.4)
    assert TrendSpec("sieve", rate_d=0.2).rate() == 0.2
    assert TrendSpec("sieve").basis_size(200) == round(200 ** (1 / 3))
    assert TrendSpec("sieve", 8).basis_size(200) == 8
    assert TrendSpec("poly", 2).basis_size(200) == 3
    with pytest.raises(ValidationError):
        TrendSpec("sieve", smoothness=1.0)
    with pytest.raises(ValidationError):
        TrendSpec("sieve", rate_d=0.7)


def test_legendre_basis_is_rescaled_legendre():
    Z = trend_basis(TrendSpec("sieve", 4), 10)
    u = np.arange(1, 11) / 10
    for j in range(4):
        c = np.zeros(j + 1)
        c[j] = 1
        np.testing.assert_allclose(Z[:, j], legendre.legval(2 * u - 1, c), atol=1e-14)


@pytest.mark.parametrize("spec", [TrendSpec("poly", 0), TrendSpec("poly", 2), TrendSpec("sieve", 5)])
def test_constant_trend(spec):
    c = np.array([1.0, -2.0, 3.5])
    Y = np.hstack([np.zeros((3, 10)), np.repeat(c[:, None], 30, axis=1)])
    fit = fit_trend(make_panel(Y, 10), spec)
    np.testing.assert_allclose(fit.fitted, np.repeat(c[:, None], 30, axis=1), atol=1e-10)


def test_linear_trend():
    T1 = 40
    u = np.arange(1, T1 + 1) / T1
    a, b = np.array([1.0, 0.0, -3.0]), np.array([2.0, -1.0, 0.5])
    post = a[:, None] + b[:, None] * u
    fit = fit_trend(make_panel(np.hstack([np.zeros((3, 5)), post]), 5), TrendSpec("poly", 1))
    np.testing.assert_allclose(fit.fitted, post, atol=1e-10)
    np.testing.assert_allclose(fit.coef, np.column_stack([a, b]), atol=1e-10)
    assert fit.rate_d == 0.5 and fit.degree_or_k == 1


def test_basis_too_large():
    with pytest.raises(ValidationError):
        fit_trend(make_panel(np.zeros((3, 10)), 5), TrendSpec("sieve", 5))


def _noiseless_null(n_post=60):
    t0 = 30
    T = t0 + n_post
    u = np.arange(1, n_post + 1) / n_post
    alpha = np.vstack([1 + u, 2 - u**2])  # smooth factor means, degree 2
    pre = np.random.default_rng(0).standard_normal((2, t0))
    Y = LOADINGS @ np.hstack([pre - pre.mean(axis=1, keepdims=True), alpha])
    fit = FactorFit(LOADINGS, np.ones(10), 2, 0.0, True, 1, ())
    return make_panel(Y, t0), fit, alpha


def test_noiseless_null_effects():
    panel, fit, alpha = _noiseless_null()
    # sigma needs non-degenerate data; the threshold is positive regardless
    d = estimate_dynamic_effects(panel, 2, TrendSpec("poly", 2), factor_fit=fit)
    np.testing.assert_allclose(d.beta_t, 0, atol=1e-9)
    np.testing.assert_allclose(d.alpha_t, alpha, atol=1e-9)
    assert all(s == tuple(range(10)) for s in d.selected_t)


def test_column_identity_and_threshold():
    p, _, _ = sim(100, 2, seed=1)
    d = estimate_dynamic_effects(p, 2, TrendSpec("sieve", 6))
    L = d.factor_fit.loadings
    np.testing.assert_array_equal(d.beta_t, d.trend.fitted - L @ d.alpha_t)
    T = p.n_periods
    assert d.threshold_t == pytest.approx(np.sqrt(2 * np.log(10 * T)) * d.sigma_hat / T ** (1 / 3))
    assert d.beta_t.shape == (10, p.n_post) and len(d.selected_t) == p.n_post
    for j in (0, 50, 99):
        res = d.trend.fitted[:, j] - L @ d.alpha_t[:, j]
        assert d.selected_t[j] == tuple(np.flatnonzero(np.abs(res) <= d.threshold_t))


def test_rotation_invariance_per_period():
    p, _, _ = sim(100, 2, seed=2)
    base = estimate_dynamic_effects(p, 2, TrendSpec("sieve", 6))
    A = np.array([[2.0, 0.5], [-1.0, 1.0]])
    fit = dataclasses.replace(base.factor_fit, loadings=base.factor_fit.loadings @ A)
    d = estimate_dynamic_effects(p, 2, TrendSpec("sieve", 6), factor_fit=fit)
    np.testing.assert_allclose(d.beta_t, base.beta_t, atol=1e-8)
    assert d.selected_t == base.selected_t


def test_unit_intercepts_drop_out():
    p, _, _ = sim(100, 2, seed=3)
    shifted = p.with_outcomes(p.outcomes + np.arange(10)[:, None] * 5.0)
    a = estimate_dynamic_effects(p, 2, TrendSpec("sieve", 6))
    b = estimate_dynamic_effects(shifted, 2, TrendSpec("sieve", 6))
    np.testing.assert_allclose(b.beta_t, a.beta_t, atol=1e-8)


def test_sieve_beats_linear_on_simulated_path():
    cfg = SimConfig(t0=200, n_interfered=2, n_reps=1, n_boot=0)
    tau_true = effect_matrix(cfg)[:, 200:] + (LOADINGS @ np.ones(2))[:, None]
    rmse_s, rmse_p = [], []
    for s in range(20):
        p, _, _ = sim(200, 2, seed=s)
        centred = p.with_outcomes(p.outcomes - p.pre.mean(axis=1, keepdims=True))
        fs = fit_trend(centred, TrendSpec("sieve", 8)).fitted
        fp = fit_trend(centred, TrendSpec("poly", 1)).fitted
        rmse_s.append(np.sqrt(np.mean((fs - tau_true) ** 2)))
        rmse_p.append(np.sqrt(np.mean((fp - tau_true) ** 2)))
    assert np.all(np.isfinite(rmse_s)) and np.all(np.isfinite(rmse_p))
    assert np.mean(rmse_s) < np.mean(rmse_p)


def test_averages_agree_with_average_effect():
    gaps = []
    for s in range(50):
        p, _, _ = sim(200, 2, seed=s)
        d = estimate_dynamic_effects(p, 2, TrendSpec("sieve", 8))
        gaps.append(d.beta_t[0].mean() - estimate_average_effects(p, 2).beta_hat[0])
    assert abs(np.median(gaps)) < 0.5


def test_errors_carry_step():
    p, _, _ = sim(50, 2, seed=0)
    with pytest.raises(StepError) as info:
        estimate_dynamic_effects(p, 2, TrendSpec("sieve", 60))
    assert info.value.step == "trend"
