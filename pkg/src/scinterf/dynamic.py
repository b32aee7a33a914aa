"""Per-period (dynamic) effects from a smoothed post-intervention trend."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import legendre, polynomial

from ._linalg import lstsq
from .errors import SCIError, StepError, ValidationError
from .estimator import _step, estimate_sigma
from .factor import FactorFit, fit_factors
from .panel import Panel
from .robust import default_h, lts_regress


@dataclass(frozen=True)
class TrendSpec:
    """How to smooth the post-period series.

    ``kind="poly"``: polynomial in t/T1 of degree ``size`` (rate 1/2).
    ``kind="sieve"``: ``size`` Legendre functions on rescaled time; when
    ``size`` is None it is ``round(T1 ** (1 / (2s - 1)))``.  The rate is
    ``(s - 1) / (2s - 1)`` for declared smoothness ``s``.
    ``rate_d`` overrides the implied rate.
    """

    kind: str = "sieve"
    size: int | None = None
    smoothness: float = 2.0
    rate_d: float | None = None

    def __post_init__(self):
        if self.kind not in ("poly", "sieve"):
            raise ValidationError(f"trend kind must be 'poly' or 'sieve', got {self.kind!r}")
        if self.kind == "poly" and (self.size is None or self.size < 0):
            raise ValidationError("polynomial trend needs a degree >= 0")
        if self.kind == "sieve" and self.smoothness <= 1:
            raise ValidationError(f"sieve smoothness must exceed 1, got {self.smoothness}")
        if self.rate_d is not None and not 0 < self.rate_d <= 0.5:
            raise ValidationError(f"rate_d must lie in (0, 1/2], got {self.rate_d}")

    @classmethod
    def parse(cls, text: str) -> TrendSpec:
        """``poly:D`` or ``sieve:K:S`` (K may be empty for the default size)."""
        parts = text.strip().split(":")
        try:
            if parts[0] == "poly" and len(parts) == 2:
                return cls("poly", int(parts[1]))
            if parts[0] == "sieve" and 1 <= len(parts) <= 3:
                k = int(parts[1]) if len(parts) > 1 and parts[1] else None
                s = float(parts[2]) if len(parts) > 2 and parts[2] else 2.0
                return cls("sieve", k, s)
        except ValueError:
            pass
        raise ValidationError(f"cannot parse trend spec {text!r}; use poly:D or sieve:K:S")

    def rate(self) -> float:
        if self.rate_d is not None:
            return self.rate_d
        if self.kind == "poly":
            return 0.5
        s = self.smoothness
        return (s - 1) / (2 * s - 1)

    def basis_size(self, n_post: int) -> int:
        if self.kind == "poly":
            return self.size + 1
        if self.size is not None:
            return self.size
        return max(1, int(round(n_post ** (1.0 / (2 * self.smoothness - 1)))))


@dataclass(frozen=True)
class TrendModel:
    kind: str
    degree_or_k: int
    rate_d: float
    fitted: np.ndarray  # N x T1
    coef: np.ndarray  # N x basis size


@dataclass(frozen=True)
class DynamicEffects:
    """Per-period effects; column j refers to post period ``t0 + j``."""

    beta_t: np.ndarray
    selected_t: tuple
    alpha_t: np.ndarray
    threshold_t: float
    sigma_hat: float
    trend: TrendModel
    factor_fit: FactorFit

    def to_dict(self, unit_labels=None, period_labels=None) -> dict:
        n, T1 = self.beta_t.shape
        labels = list(unit_labels) if unit_labels is not None else [str(i) for i in range(n)]
        periods = list(period_labels) if period_labels is not None else [str(j) for j in range(T1)]
        return {
            "trend": {"kind": self.trend.kind, "size": self.trend.degree_or_k, "rate_d": self.trend.rate_d},
            "threshold": self.threshold_t,
            "sigma_hat": self.sigma_hat,
            "periods": [
                {
                    "period": periods[j],
                    "beta": {labels[i]: float(self.beta_t[i, j]) for i in range(n)},
                    "tau_hat": {labels[i]: float(self.trend.fitted[i, j]) for i in range(n)},
                    "alpha": self.alpha_t[:, j].tolist(),
                    "selected": [labels[i] for i in self.selected_t[j]],
                }
                for j in range(T1)
            ],
        }


def trend_basis(spec: TrendSpec, n_post: int) -> np.ndarray:
    k = spec.basis_size(n_post)
    u = np.arange(1, n_post + 1) / n_post
    if spec.kind == "poly":
        return polynomial.polyvander(u, k - 1)
    return legendre.legvander(2.0 * u - 1.0, k - 1)


def fit_trend(panel: Panel, spec: TrendSpec) -> TrendModel:
    """Unit-wise least-squares trend of the post-period outcomes."""
    T1 = panel.n_post
    k = spec.basis_size(T1)
    if T1 < k + (spec.kind == "sieve"):
        raise ValidationError(f"{T1} post periods cannot support a basis of size {k}")
    Z = trend_basis(spec, T1)
    coef = lstsq(Z, panel.post.T, what="trend basis").T
    return TrendModel(spec.kind, k if spec.kind == "sieve" else k - 1, spec.rate(), coef @ Z.T, coef)


def estimate_dynamic_effects(
    panel: Panel,
    r: int,
    spec: TrendSpec,
    h: int | None = None,
    *,
    factor_fit: FactorFit | None = None,
) -> DynamicEffects:
    """Per-period LTS of the fitted trend on the pre-period loadings.

    Outcomes are centred at each unit's pre-period mean before the trend is
    fitted, so unit-level constants drop out as in the average-effect
    estimator.  No refit on the per-period selected sets is performed; they
    are reported alongside the effects.
    """
    n, T = panel.n_units, panel.n_periods
    h = default_h(n) if h is None else h
    centred = panel.with_outcomes(panel.outcomes - panel.pre.mean(axis=1, keepdims=True))
    trend = _step("trend", fit_trend, centred, spec)
    if factor_fit is None:
        factor_fit = _step("factor analysis", fit_factors, panel, r)
    L = factor_fit.loadings
    sigma = _step("sigma", estimate_sigma, panel, factor_fit.r, "pre")
    thr = math.sqrt(2.0 * math.log(n * T)) * sigma / T**trend.rate_d
    T1 = panel.n_post
    alpha = np.empty((factor_fit.r, T1))
    selected = []
    for j in range(T1):
        tau = trend.fitted[:, j]
        try:
            fit = lts_regress(tau, L, h)
        except SCIError as exc:
            raise StepError(f"lts (post period {j})", exc) from exc
        alpha[:, j] = fit.coef
        selected.append(tuple(int(i) for i in np.flatnonzero(np.abs(fit.residuals) <= thr)))
    beta = trend.fitted - L @ alpha
    return DynamicEffects(beta, tuple(selected), alpha, thr, sigma, trend, factor_fit)
