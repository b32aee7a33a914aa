"""Average direct and interference effects with data-driven control selection.

Pipeline: factor loadings from the pre-period, LTS regression of the mean
difference on the loadings, hard-threshold selection of non-interfered
units, and a least-squares refit of the post-period factor mean on the
selected units.

All post-period means are taken after centring each unit at its
pre-intervention mean, so the "post mean" used by the refit equals the
post-minus-pre difference ``diff`` and unit-level constants drop out.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from ._linalg import lstsq
from .errors import NumericalError, SCIError, StepError, ValidationError
from .factor import FactorFit, fit_factors
from .panel import CovariatePanel, Panel, split_means
from .robust import LtsFit, default_h, lts_regress


@dataclass(frozen=True)
class EffectEstimate:
    """Everything the average-effect pipeline produces.

    ``beta_hat`` is reported for every unit, including selected controls
    (where it is the refit residual rather than an exact zero).
    ``post_mean`` is the pre-centred post-period mean (identical to ``diff``);
    ``raw_post_mean`` is the uncentred one.
    """

    beta_hat: np.ndarray
    alpha_tilde: np.ndarray
    alpha1_hat: np.ndarray
    selected_controls: tuple
    sigma_hat: float
    threshold: float
    weights: np.ndarray
    factor_fit: FactorFit
    lts: LtsFit
    diff: np.ndarray
    post_mean: np.ndarray
    raw_post_mean: np.ndarray
    rho: float
    notes: tuple = field(default=())

    @property
    def lts_residuals(self) -> np.ndarray:
        return self.lts.residuals

    @property
    def treated_selected(self) -> bool:
        return 0 in self.selected_controls

    def to_dict(self, unit_labels=None) -> dict:
        n = len(self.beta_hat)
        labels = list(unit_labels) if unit_labels is not None else [str(i) for i in range(n)]
        sel = set(self.selected_controls)
        return {
            "units": [
                {
                    "unit": labels[i],
                    "beta_hat": float(self.beta_hat[i]),
                    "selected_control": i in sel,
                    "no_detected_effect": i in sel,
                    "beta_hat_truncated": 0.0 if i in sel else float(self.beta_hat[i]),
                    "weight": float(self.weights[i]),
                    "lts_residual": float(self.lts.residuals[i]),
                    "diff": float(self.diff[i]),
                    "post_mean_centered": float(self.post_mean[i]),
                    "post_mean_raw": float(self.raw_post_mean[i]),
                }
                for i in range(n)
            ],
            "alpha_tilde": self.alpha_tilde.tolist(),
            "alpha1_hat": self.alpha1_hat.tolist(),
            "selected_controls": [labels[i] for i in self.selected_controls],
            "sigma_hat": self.sigma_hat,
            "threshold": self.threshold,
            "lts": {"h": self.lts.h, "objective": self.lts.objective, "exact": self.lts.exact},
            "rho": self.rho,
            "factor_fit": self.factor_fit.to_dict(),
            "notes": list(self.notes),
        }


@dataclass(frozen=True)
class CovariateAdjustment:
    """Reduced-form covariate coefficients and the covariate-free residual panel."""

    u_tilde: np.ndarray
    residual_panel: Panel


def estimate_sigma(panel: Panel, r: int, window: str = "full") -> float:
    """Idiosyncratic scale from the trailing eigenvalues of the sample covariance.

    Averages (over N) the eigenvalues ranked ``ceil(N/2) - r`` through ``N``
    (1-based, decreasing order) of the centred covariance of either the full
    sample (``window="full"``) or the pre-period only (``window="pre"``).
    """
    n = panel.n_units
    if window == "full":
        Y = panel.outcomes
    elif window == "pre":
        Y = panel.pre
    else:
        raise ValidationError(f"window must be 'full' or 'pre', got {window!r}")
    if Y.shape[1] < 2:
        raise NumericalError("need at least two periods to compute a covariance")
    first = math.ceil(n / 2) - r
    if r < 1 or first < 1:
        raise ValidationError(f"r={r} must satisfy 1 <= r < ceil(N/2) = {math.ceil(n / 2)}")
    Yc = Y - Y.mean(axis=1, keepdims=True)
    V = Yc @ Yc.T / Y.shape[1]
    nu = np.linalg.eigvalsh(V)[::-1]
    return float(math.sqrt(max(nu[first - 1 :].sum(), 0.0) / n))


def selection_threshold(sigma_hat: float, n: int, T: int) -> float:
    return math.sqrt(2.0 * math.log(n * T) / T) * sigma_hat


def select_controls(diff, factor_fit: FactorFit, alpha_tilde, sigma_hat: float, T: int) -> tuple:
    """Units whose LTS residual is within the hard threshold."""
    diff = np.asarray(diff, dtype=float)
    L = factor_fit.loadings
    if L.shape != (len(diff), len(np.atleast_1d(alpha_tilde))):
        raise ValidationError("diff, loadings and alpha_tilde have inconsistent shapes")
    res = diff - L @ np.atleast_1d(alpha_tilde)
    thr = selection_threshold(sigma_hat, len(diff), T)
    selected = tuple(int(i) for i in np.flatnonzero(np.abs(res) <= thr))
    if len(selected) < factor_fit.r:
        raise NumericalError(
            f"only {len(selected)} units pass the threshold {thr:.4g}, fewer than r={factor_fit.r}; "
            "inspect the number of factors and the LTS trimming h"
        )
    return selected


def refit(panel: Panel, factor_fit: FactorFit, selected, post_mean=None):
    """Least-squares post-period factor mean on ``selected``; effects for all units.

    ``post_mean`` defaults to the pre-centred post-period mean.  Returns
    ``(alpha1_hat, beta_hat)`` with ``beta_hat = post_mean - L @ alpha1_hat``.
    """
    sel = np.asarray(sorted(selected), dtype=np.intp)
    if len(sel) < factor_fit.r:
        raise ValidationError(f"{len(sel)} selected units cannot identify r={factor_fit.r} factor means")
    if post_mean is None:
        post_mean = split_means(panel)[2]
    L = factor_fit.loadings
    alpha1 = lstsq(L[sel], post_mean[sel], what="selected loadings")
    return alpha1, post_mean - L @ alpha1


def synthetic_weights(factor_fit: FactorFit, selected) -> np.ndarray:
    """Implied synthetic-control weights ``l_1' (L_C' L_C)^-1 l_j`` on the selected units."""
    L = factor_fit.loadings
    sel = np.asarray(sorted(selected), dtype=np.intp)
    if len(sel) < factor_fit.r:
        raise NumericalError(f"{len(sel)} units cannot span r={factor_fit.r} loadings")
    Q, R = linalg.qr(L[sel], mode="economic")
    d = np.abs(np.diag(R))
    if np.any(d < 1e-10 * d.max()):
        raise NumericalError(f"selected loadings are rank deficient (columns {np.flatnonzero(d < 1e-10 * d.max()).tolist()})")
    w = np.zeros(L.shape[0])
    # L_C (L_C'L_C)^-1 l_1 = Q R^-T l_1
    w[sel] = Q @ linalg.solve_triangular(R, L[0], trans="T")
    return w


def _step(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except StepError:
        raise
    except SCIError as exc:
        raise StepError(name, exc) from exc


def estimate_from_fit(
    panel: Panel,
    factor_fit: FactorFit,
    h: int | None = None,
    *,
    sigma_window: str = "full",
    selected: tuple | None = None,
) -> EffectEstimate:
    """Run the LTS, selection and refit steps for given loadings.

    Passing ``selected`` freezes the control set instead of re-selecting.
    """
    n, T = panel.n_units, panel.n_periods
    r = factor_fit.r
    h = default_h(n) if h is None else h
    _, raw_post, diff = split_means(panel)
    post = diff
    lts = _step("lts", lts_regress, diff, factor_fit.loadings, h)
    sigma = _step("sigma", estimate_sigma, panel, r, sigma_window)
    thr = selection_threshold(sigma, n, T)
    if selected is None:
        selected = _step("selection", select_controls, diff, factor_fit, lts.coef, sigma, T)
    alpha1, beta = _step("refit", refit, panel, factor_fit, selected, post)
    notes = []
    donors = tuple(j for j in selected if j != 0)
    if 0 in selected:
        notes.append("treated unit falls inside the selected set (no detected direct effect)")
    try:
        weights = synthetic_weights(factor_fit, donors)
    except NumericalError as exc:
        weights = np.zeros(n)
        notes.append(f"synthetic weights unavailable: {exc}")
    return EffectEstimate(
        beta_hat=beta,
        alpha_tilde=lts.coef,
        alpha1_hat=alpha1,
        selected_controls=tuple(selected),
        sigma_hat=sigma,
        threshold=thr,
        weights=weights,
        factor_fit=factor_fit,
        lts=lts,
        diff=diff,
        post_mean=post,
        raw_post_mean=raw_post,
        rho=panel.rho,
        notes=tuple(notes),
    )


def estimate_average_effects(
    panel: Panel,
    r: int,
    h: int | None = None,
    *,
    factor_init: FactorFit | None = None,
    selected: tuple | None = None,
) -> EffectEstimate:
    """Average direct (unit 0) and interference (other units) effects.

    Parameters
    ----------
    panel : Panel
    r : int
        Number of latent factors.
    h : int, optional
        LTS trimming count, default ``N // 2 + 1``.
    factor_init : FactorFit, optional
        Warm start for the factor EM.
    selected : tuple, optional
        Freeze the control set (skips the threshold step).

    Raises
    ------
    StepError
        Wraps the failing component's error with the pipeline step name.
    """
    fit = _step("factor analysis", fit_factors, panel, r, init=factor_init)
    return estimate_from_fit(panel, fit, h, selected=selected)


def residualize_covariates(panel: Panel, covariates: CovariatePanel) -> CovariateAdjustment:
    """Remove the pre-period linear projection of outcomes on observed covariates.

    Each unit's pre-period series is regressed (no intercept) on the
    covariates; the fitted coefficients are applied to every period.
    Covariates that are identically zero get a zero coefficient.
    """
    C = covariates.covariates
    if C.shape[1] != panel.n_periods:
        raise ValidationError(f"covariates have {C.shape[1]} periods, panel has {panel.n_periods}")
    p = C.shape[0]
    if p >= panel.t0:
        raise ValidationError(f"{p} covariates need more than {panel.t0} pre-periods")
    U = np.zeros((panel.n_units, p))
    live = np.flatnonzero(np.any(C != 0, axis=1))
    if len(live):
        Cpre = C[live, : panel.t0]
        U[:, live] = lstsq(Cpre.T, panel.pre.T, what="pre-period covariate design").T
    resid = panel.outcomes - U @ C
    return CovariateAdjustment(U, panel.with_outcomes(resid))
