"""Gaussian maximum-likelihood factor analysis of the pre-intervention panel.

The fit runs EM on the sample correlation matrix, then rotates the loadings
so that ``L' Psi^-1 L`` is diagonal with decreasing entries, and finally maps
back to the outcome scale.  Only the column space of the loadings matters to
the downstream estimator; the rotation just pins down a canonical basis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import ConvergenceError, NumericalError, ValidationError
from .panel import Panel

PSI_FLOOR = 1e-3
MAX_ITER = 1000
TOL = 1e-8
POLISH_EVERY = 10


@dataclass(frozen=True)
class FactorFit:
    """Result of :func:`fit_factors`.

    Attributes
    ----------
    loadings : ndarray, shape (N, r)
        Loadings on the outcome scale (outcome units per factor SD).
    uniquenesses : ndarray, shape (N,)
        Idiosyncratic variances on the outcome scale.
    r : int
    log_likelihood : float
        Gaussian log-likelihood of the pre-period sample covariance at the fit.
    converged : bool
    n_iter : int
    heywood : tuple of int
        Units whose correlation-scale uniqueness sits on the floor.
    """

    loadings: np.ndarray
    uniquenesses: np.ndarray
    r: int
    log_likelihood: float
    converged: bool
    n_iter: int
    heywood: tuple = ()

    @property
    def covariance(self) -> np.ndarray:
        return self.loadings @ self.loadings.T + np.diag(self.uniquenesses)

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "loadings": self.loadings.tolist(),
            "uniquenesses": self.uniquenesses.tolist(),
            "log_likelihood": self.log_likelihood,
            "converged": self.converged,
            "n_iter": self.n_iter,
            "heywood": list(self.heywood),
        }


def check_factor_dof(n: int, r: int) -> None:
    """Classical identifiability: ``(n - r)^2 >= n + r``."""
    if r < 1:
        raise ValidationError(f"r must be >= 1, got {r}")
    if r >= n or (n - r) ** 2 < n + r:
        raise ValidationError(
            f"r={r} factors are not identifiable with {n} units: need (N-r)^2 >= N+r"
        )


def _corr_loglik(L, psi, R):
    # per-observation log-likelihood up to the 2*pi constant
    S = L @ L.T + np.diag(psi)
    _, logdet = np.linalg.slogdet(S)
    return -0.5 * (logdet + np.trace(np.linalg.solve(S, R)))


def _start(R, r):
    psi = (1.0 - 0.5 * r / R.shape[0]) / np.diag(np.linalg.inv(R))
    psi = np.clip(psi, PSI_FLOOR, 1.0)
    return _loadings_given_psi(R, psi, r), psi


def _loadings_given_psi(R, psi, r):
    s = np.sqrt(psi)
    e, V = np.linalg.eigh(R / np.outer(s, s))
    e, V = e[::-1][:r], V[:, ::-1][:, :r]
    return s[:, None] * V * np.sqrt(np.maximum(e - 1.0, 0.0))


def _em_step(R, L, psi):
    # Woodbury: Sigma^-1 = Psi^-1 - Psi^-1 L (I + L' Psi^-1 L)^-1 L' Psi^-1
    r = L.shape[1]
    PiL = L / psi[:, None]
    M = np.linalg.inv(np.eye(r) + L.T @ PiL)
    B = M @ PiL.T  # E[z | y] = B y
    RB = R @ B.T
    Czz = np.eye(r) - B @ L + B @ RB
    L = np.linalg.solve(Czz, RB.T).T
    psi = np.maximum(np.diag(R) - np.einsum("ij,ij->i", L, RB), PSI_FLOOR)
    return L, psi


def _em(R, L, psi, max_iter, tol, trace=None):
    """EM with SQUAREM extrapolation; falls back to plain EM when it would lose likelihood.

    Every ``POLISH_EVERY`` cycles the iterate is polished on the profile
    likelihood; the polished point is accepted once a plain EM step no longer
    changes its likelihood.
    """
    r = L.shape[1]
    ll = _corr_loglik(L, psi, R)
    if trace is not None:
        trace.append(ll)
    for it in range(1, max_iter + 1):
        L1, psi1 = _em_step(R, L, psi)
        ll1 = _corr_loglik(L1, psi1, R)
        L2, psi2 = _em_step(R, L1, psi1)
        dL, dp = L1 - L, psi1 - psi
        vL, vp = L2 - L1 - dL, psi2 - psi1 - dp
        vnorm = np.sqrt((vL**2).sum() + (vp**2).sum())
        step = -np.sqrt((dL**2).sum() + (dp**2).sum()) / vnorm if vnorm > 0 else -1.0
        step = min(step, -1.0)
        ll2 = _corr_loglik(L2, psi2, R)
        L_new, psi_new, new = L2, psi2, ll2
        if step < -1.0:
            Lx = L - 2 * step * dL + step**2 * vL
            px = np.maximum(psi - 2 * step * dp + step**2 * vp, PSI_FLOOR)
            Lx, px = _em_step(R, Lx, px)
            llx = _corr_loglik(Lx, px, R)
            if np.isfinite(llx) and llx >= ll2:
                L_new, psi_new, new = Lx, px, llx
        L, psi = L_new, psi_new
        if trace is not None:
            trace.append(new)
        # converged when neither a plain EM step nor the extrapolated cycle
        # moves the likelihood
        eps = tol * max(abs(ll), 1.0)
        if abs(ll1 - ll) <= eps and abs(new - ll) <= eps:
            return L, psi, new, it, True
        ll = new
        if it % POLISH_EVERY == 0:
            Lp, pp = _polish(R, L, psi, r)
            llp = _corr_loglik(Lp, pp, R)
            if llp > ll:
                step_ll = _corr_loglik(*_em_step(R, Lp, pp), R)
                L, psi, ll = Lp, pp, llp
                if trace is not None:
                    trace.append(llp)
                if abs(step_ll - llp) <= tol * max(abs(llp), 1.0):
                    return L, psi, llp, it, True
    return L, psi, ll, max_iter, False


def _profile(psi, R, r):
    # discrepancy of the best r-factor fit for fixed psi, and its gradient in psi
    s = np.sqrt(psi)
    e, V = np.linalg.eigh(R / np.outer(s, s))
    tail = e[:-r]
    f = -np.sum(np.log(tail) - tail) - R.shape[0] + r
    L = s[:, None] * V[:, -r:] * np.sqrt(np.maximum(e[-r:] - 1.0, 0.0))
    g = np.einsum("ij,ij->i", L, L) + psi - np.diag(R)
    return f, g / psi**2


def _polish(R, L, psi, r):
    """Quasi-Newton refinement of the EM optimum on the profile likelihood in psi.

    EM crawls along flat ridges (typically towards a Heywood boundary); the
    bounded optimiser reaches the end of the ridge in a few steps.
    """
    res = optimize.minimize(
        _profile, psi, args=(R, r), jac=True, method="L-BFGS-B",
        bounds=[(PSI_FLOOR, float(d)) for d in np.diag(R)],
        options={"ftol": 1e-14, "gtol": 1e-10, "maxiter": 500},
    )
    psi_new = np.clip(res.x, PSI_FLOOR, None)
    L_new = _loadings_given_psi(R, psi_new, r)
    if _corr_loglik(L_new, psi_new, R) >= _corr_loglik(L, psi, R):
        return L_new, psi_new
    return L, psi


def _canonical(L, psi):
    """Rotate so L' Psi^-1 L is diagonal (decreasing) and fix column signs."""
    M = (L / psi[:, None]).T @ L
    e, Q = np.linalg.eigh(M)
    L = L @ Q[:, ::-1]
    idx = np.argmax(np.abs(L), axis=0)
    signs = np.sign(L[idx, np.arange(L.shape[1])])
    signs[signs == 0] = 1.0
    return L * signs


def fit_factors(
    panel: Panel,
    r: int,
    *,
    max_iter: int = MAX_ITER,
    tol: float = TOL,
    init: FactorFit | None = None,
    trace: list | None = None,
) -> FactorFit:
    """Fit an r-factor model to the pre-intervention outcomes of ``panel``.

    Parameters
    ----------
    panel : Panel
    r : int
        Number of latent factors.
    max_iter, tol
        EM stops when the relative log-likelihood change drops below ``tol``.
    init : FactorFit, optional
        Warm start (e.g. the point fit when refitting bootstrap resamples).
        Defaults to the principal-axis start.
    trace : list, optional
        If given, receives the correlation-scale log-likelihood after every
        EM iteration.

    Raises
    ------
    ValidationError
        Too many factors for the number of units, or too few pre-periods.
    NumericalError
        Singular pre-period covariance.
    ConvergenceError
        No convergence within ``max_iter``; ``.last`` holds the final iterate.
    """
    n, t0 = panel.n_units, panel.t0
    check_factor_dof(n, r)
    if t0 <= n:
        raise ValidationError(f"factor analysis needs more pre-periods ({t0}) than units ({n})")
    Y = panel.pre
    Yc = Y - Y.mean(axis=1, keepdims=True)
    S = Yc @ Yc.T / t0
    sd = np.sqrt(np.diag(S))
    if np.any(sd <= 0):
        raise NumericalError(
            f"units {np.flatnonzero(sd <= 0).tolist()} are constant before the intervention"
        )
    R = S / np.outer(sd, sd)
    e = np.linalg.eigvalsh(R)
    if e[0] <= 1e-10 * e[-1]:
        raise NumericalError(
            "pre-intervention covariance is singular; use fewer factors or more periods"
        )
    if init is not None and init.r == r:
        L = init.loadings / sd[:, None]
        psi = np.clip(init.uniquenesses / sd**2, PSI_FLOOR, None)
    else:
        L, psi = _start(R, r)
    L, psi, ll, n_iter, ok = _em(R, L, psi, max_iter, tol, trace)
    if ok:
        L, psi = _polish(R, L, psi, r)
        ll = _corr_loglik(L, psi, R)
    L = _canonical(L, psi)
    # back to the outcome scale; log-likelihood of the covariance S
    loglik = t0 * (ll - np.log(sd).sum() - 0.5 * n * np.log(2 * np.pi))
    heywood = tuple(int(i) for i in np.flatnonzero(psi <= PSI_FLOOR * (1 + 1e-9)))
    fit = FactorFit(L * sd[:, None], psi * sd**2, r, float(loglik), ok, n_iter, heywood)
    if not ok:
        raise ConvergenceError(f"factor EM did not converge in {max_iter} iterations", last=fit)
    return fit


def suggest_r(panel: Panel) -> int:
    """Kaiser rule: eigenvalues of the pre-period correlation matrix above one."""
    Y = panel.pre
    with np.errstate(invalid="ignore", divide="ignore"):
        R = np.corrcoef(Y)
    R = np.nan_to_num(np.atleast_2d(R))
    return int(np.sum(np.linalg.eigvalsh(R) > 1.0 + 1e-9))
