import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from scinterf.errors import NumericalError, StepError, ValidationError
from scinterf.estimator import (
    estimate_average_effects,
    estimate_from_fit,
    estimate_sigma,
    refit,
    residualize_covariates,
    select_controls,
    selection_threshold,
    synthetic_weights,
)
from scinterf.factor import FactorFit
from scinterf.panel import CovariatePanel, split_means
from scinterf.simulation import LOADINGS

from conftest import make_panel, sim


def whitened(n, T, seed=0):
    rng = np.random.default_rng(seed)
    Y = rng.standard_normal((n, T))
    Y -= Y.mean(axis=1, keepdims=True)
    return np.linalg.solve(np.linalg.cholesky(Y @ Y.T / T), Y)


def fake_fit(L):
    L = np.asarray(L, dtype=float)
    return FactorFit(L, np.ones(L.shape[0]), L.shape[1], 0.0, True, 1, ())


def test_sigma_identity_covariance():
    p = make_panel(whitened(10, 60), 30)
    assert estimate_sigma(p, 2, "full") == pytest.approx(math.sqrt(0.8), abs=1e-12)


def test_sigma_summation_range_n9():
    # eigenvalues 9, 8, ..., 1; ranks 3..9 average to (7 + ... + 1) / 9
    ev = np.arange(9, 0, -1, dtype=float)
    Q = np.linalg.qr(np.random.default_rng(1).standard_normal((9, 9)))[0]
    Y = Q @ (np.sqrt(ev)[:, None] * whitened(9, 40, 2))
    assert estimate_sigma(make_panel(Y, 20), 2) ** 2 == pytest.approx(28 / 9, rel=1e-10)


def test_sigma_windows_differ_and_validate():
    p, _, _ = sim(100, 2, seed=3)
    assert estimate_sigma(p, 2, "pre") != estimate_sigma(p, 2, "full")
    with pytest.raises(ValidationError):
        estimate_sigma(p, 2, "post")
    with pytest.raises(ValidationError):
        estimate_sigma(p, 5)  # ceil(10/2) - 5 = 0


def test_sigma_on_simulated_design():
    vals = [estimate_sigma(sim(200, 2, seed=s)[0], 2) for s in range(100)]
    assert np.mean((np.array(vals) >= 0.8) & (np.array(vals) <= 1.6)) >= 0.95


def test_threshold_value():
    thr = selection_threshold(1.0, 10, 400)
    assert thr == pytest.approx(math.sqrt(2 * math.log(4000) / 400), rel=1e-14)
    assert thr == pytest.approx(0.20366, abs=1e-4)
    assert selection_threshold(2.5, 10, 400) == pytest.approx(2.5 * thr, rel=1e-14)


def test_zero_residuals_select_everyone():
    L = np.random.default_rng(0).standard_normal((7, 2))
    a = np.array([0.3, -1.0])
    assert select_controls(L @ a, fake_fit(L), a, 1.0, 100) == tuple(range(7))


def test_too_few_selected():
    L = np.ones((5, 2)) + np.eye(5, 2)
    with pytest.raises(NumericalError, match="fewer than r"):
        select_controls(np.arange(5) * 10.0, fake_fit(L), np.zeros(2), 1.0, 100)


def test_refit_perfect_fit_null():
    L = np.random.default_rng(2).standard_normal((6, 2))
    p = make_panel(np.zeros((6, 4)), 2)
    a1, beta = refit(p, fake_fit(L), range(6), post_mean=L @ np.array([1.0, 2.0]))
    np.testing.assert_allclose(beta, 0, atol=1e-12)
    np.testing.assert_allclose(a1, [1.0, 2.0], atol=1e-12)


def test_refit_constant_loading():
    post = np.array([1.0, 4.0, -2.0, 7.0])
    p = make_panel(np.zeros((4, 4)), 2)
    a1, beta = refit(p, fake_fit(np.ones((4, 1))), range(4), post_mean=post)
    assert a1[0] == pytest.approx(post.mean())
    np.testing.assert_allclose(beta, post - post.mean(), atol=1e-12)


def test_refit_rank_deficient():
    L = np.array([[1.0, 2.0], [2.0, 4.0], [3.0, 6.0], [1.0, 0.0]])
    with pytest.raises(NumericalError, match="column"):
        refit(make_panel(np.zeros((4, 4)), 2), fake_fit(L), [0, 1, 2], post_mean=np.ones(4))


def test_uniform_weights():
    w = synthetic_weights(fake_fit(np.ones((6, 1))), [1, 2, 3, 4])
    np.testing.assert_allclose(w, [0, 0.25, 0.25, 0.25, 0.25, 0], atol=1e-14)


def test_matching_unit_weight():
    L = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
    w = synthetic_weights(fake_fit(L), [1, 2])
    np.testing.assert_allclose(w, [0, 0, 1, 0], atol=1e-14)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3))
def test_loading_match(seed, r):
    rng = np.random.default_rng(seed)
    L = rng.standard_normal((9, r))
    sel = sorted(rng.choice(np.arange(1, 9), size=r + 2, replace=False).tolist())
    w = synthetic_weights(fake_fit(L), sel)
    np.testing.assert_allclose(w @ L, L[0], atol=1e-10)
    assert np.all(w[[j for j in range(9) if j not in sel]] == 0)


@pytest.mark.parametrize("seed", range(10))
def test_identities_on_simulated_panels(seed):
    p, _, _ = sim(100, 2, seed=seed)
    est = estimate_average_effects(p, 2)
    post = est.post_mean
    L = est.factor_fit.loadings
    np.testing.assert_allclose(est.beta_hat, post - L @ est.alpha1_hat, atol=1e-12)
    np.testing.assert_allclose(post, split_means(p)[2], atol=1e-12)
    if 0 not in est.selected_controls:
        assert est.beta_hat[0] == pytest.approx(post[0] - est.weights @ post, abs=1e-10)
        np.testing.assert_allclose(est.weights @ L, L[0], atol=1e-10)
    res = est.diff - L @ est.alpha_tilde
    assert est.selected_controls == tuple(np.flatnonzero(np.abs(res) <= est.threshold))
    assert len(est.selected_controls) >= 2
    assert est.rho == 0.5


@pytest.mark.parametrize("seed", range(5))
def test_rotation_invariance(seed):
    p, _, _ = sim(200, 2, seed=seed)
    base = estimate_average_effects(p, 2)
    rng = np.random.default_rng(100 + seed)
    for _ in range(10):
        A = rng.standard_normal((2, 2)) + np.eye(2)
        fit = dataclasses.replace(base.factor_fit, loadings=base.factor_fit.loadings @ A)
        est = estimate_from_fit(p, fit)
        assert est.selected_controls == base.selected_controls
        np.testing.assert_allclose(est.beta_hat, base.beta_hat, atol=1e-8)
        np.testing.assert_allclose(est.lts.residuals, base.lts.residuals, atol=1e-8)
        np.testing.assert_allclose(est.weights, base.weights, atol=1e-8)
        np.testing.assert_allclose(A @ est.alpha1_hat, base.alpha1_hat, atol=1e-8)


def test_shift_equivariance(sim_panel):
    p, _, _ = sim_panel
    c = np.zeros(p.n_units)
    c[[0, 3, 7]] = [50.0, -12.0, 3.5]
    a = estimate_average_effects(p, 2)
    b = estimate_average_effects(p.with_outcomes(p.outcomes + c[:, None]), 2)
    np.testing.assert_allclose(b.diff, a.diff, atol=1e-8)
    np.testing.assert_allclose(b.beta_hat, a.beta_hat, atol=1e-8)
    assert b.selected_controls == a.selected_controls


def test_frozen_selection(sim_panel):
    p, _, _ = sim_panel
    est = estimate_average_effects(p, 2, selected=(2, 3, 4, 5, 6))
    assert est.selected_controls == (2, 3, 4, 5, 6)


def test_step_errors_are_labelled():
    p, _, _ = sim(50, 1, seed=0)
    with pytest.raises(StepError) as info:
        estimate_average_effects(p, 7)
    assert info.value.step == "factor analysis"
    assert isinstance(info.value.cause, ValidationError)


def test_treated_unit_selected_under_null():
    rng = np.random.default_rng(0)
    L = rng.standard_normal((10, 2))
    Y = L @ rng.standard_normal((2, 400)) + rng.standard_normal((10, 400))
    est = estimate_average_effects(make_panel(Y, 200), 2)
    if est.treated_selected:
        assert any("treated unit" in n for n in est.notes)
        assert est.weights[0] == 0


def test_null_design_keeps_majority():
    # no effects and no factor mean shift: almost all units should be kept
    hits, near_zero = 0, 0
    for s in range(100):
        rng = np.random.default_rng([s, 99])
        Y = LOADINGS @ rng.standard_normal((2, 400)) + rng.standard_normal((10, 400))
        est = estimate_average_effects(make_panel(Y, 200), 2)
        hits += len(est.selected_controls) >= 10 // 2 + 2
        sel = list(est.selected_controls)
        near_zero += np.all(np.abs(est.beta_hat[sel]) <= est.threshold)
    assert hits >= 95
    assert near_zero >= 95


def test_zero_covariates_are_inert(sim_panel):
    p, _, _ = sim_panel
    adj = residualize_covariates(p, CovariatePanel(np.zeros((2, p.n_periods)), ("a", "b")))
    assert np.all(adj.u_tilde == 0)
    np.testing.assert_array_equal(adj.residual_panel.outcomes, p.outcomes)


def test_pure_covariate_regression():
    rng = np.random.default_rng(4)
    C = rng.standard_normal((2, 300))
    U = rng.standard_normal((5, 2))
    eps = rng.standard_normal((5, 300))
    adj = residualize_covariates(make_panel(U @ C + eps, 200), CovariatePanel(C, ("a", "b")))
    pre = adj.residual_panel.pre
    # pre-period residuals equal eps minus its projection on the covariates
    Cp = C[:, :200]
    proj = eps[:, :200] @ Cp.T @ np.linalg.solve(Cp @ Cp.T, Cp)
    np.testing.assert_allclose(pre, eps[:, :200] - proj, atol=1e-10)
    gram = pre @ Cp.T
    assert np.abs(gram).max() < 1e-8 * np.abs(U @ Cp @ Cp.T).max()
    np.testing.assert_allclose(adj.residual_panel.outcomes, U @ C + eps - adj.u_tilde @ C, atol=1e-12)
    assert adj.residual_panel.t0 == 200


def test_covariate_errors(sim_panel):
    p, _, _ = sim_panel
    with pytest.raises(ValidationError):
        residualize_covariates(p, CovariatePanel(np.ones((1, 10)), ("a",)))
    c = np.ones((2, p.n_periods))
    with pytest.raises(NumericalError):
        residualize_covariates(p, CovariatePanel(c, ("a", "b")))


def test_covariate_adjustment_preserves_bias():
    bias_plain, bias_adj = [], []
    for s in range(200):
        p, truth, _ = sim(200, 1, seed=s)
        rng = np.random.default_rng([s, 7])
        c = rng.standard_normal(p.n_periods)
        coef = np.linspace(-1, 1, p.n_units)
        pc = p.with_outcomes(p.outcomes + np.outer(coef, c))
        bias_plain.append(estimate_average_effects(p, 2).beta_hat[0] - truth[0])
        adj = residualize_covariates(pc, CovariatePanel(c[None, :], ("c",)))
        bias_adj.append(estimate_average_effects(adj.residual_panel, 2).beta_hat[0] - truth[0])
    assert abs(np.median(bias_adj) - np.median(bias_plain)) < 0.1


def test_direct_effect_unbiased():
    bias = []
    for s in range(300):
        p, truth, _ = sim(200, 1, seed=s)
        bias.append(estimate_average_effects(p, 2).beta_hat[0] - truth[0])
    assert abs(np.median(bias)) < 0.1


def test_interference_effects_recovered():
    b2, b10 = [], []
    for s in range(300):
        p, truth, _ = sim(200, 2, seed=s)
        beta = estimate_average_effects(p, 2).beta_hat
        b2.append(beta[1] - truth[1])
        b10.append(beta[9] - truth[9])
    assert abs(np.median(b2)) < 0.1
    assert abs(np.median(b10)) < 0.1
    assert np.median(np.abs(b2)) < 0.3


def test_refit_median_absolute_error():
    err = []
    for s in range(300):
        p, truth, _ = sim(200, 2, seed=s)
        err.append(estimate_average_effects(p, 2).beta_hat[0] - truth[0])
    assert np.median(np.abs(err)) < 0.15
