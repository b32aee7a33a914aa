"""Least trimmed squares regression without intercept.

Small problems (the usual case: a handful of units) are solved exactly by
enumerating every h-subset.  Larger ones fall back to FAST-LTS: random
elemental starts followed by concentration steps (C-steps).
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import lru_cache
from math import comb

import numpy as np

from ._linalg import lstsq
from .errors import NumericalError, ValidationError

EXHAUSTIVE_CAP = 200_000
N_STARTS = 500
N_KEEP = 10
_CHUNK = 50_000


@dataclass(frozen=True)
class LtsFit:
    """Result of :func:`lts_regress`.

    ``objective`` is the sum of the ``h`` smallest squared residuals at
    ``coef``; ``inlier_set`` lists the units achieving it (ties broken by
    index).  ``exact`` is True when every h-subset was examined.
    """

    coef: np.ndarray
    objective: float
    h: int
    residuals: np.ndarray
    inlier_set: tuple
    exact: bool


def default_h(n: int) -> int:
    return n // 2 + 1


def lts_breakdown_check(n: int, r: int) -> int:
    """Maximum number of affected units the majority-valid-controls condition tolerates.

    Returns ``floor(n/2) - r``.  Raises when ``n < 2r + 2`` since no
    interference can be tolerated at all.
    """
    if r < 1:
        raise ValidationError(f"r must be >= 1, got {r}")
    if n < 2 * r + 2:
        raise ValidationError(f"no interference budget at N={n} and r={r} (need N >= {2 * r + 2})")
    return n // 2 - r


def _trimmed(res2, h):
    order = np.argsort(res2, kind="stable")
    keep = order[:h]
    return float(res2[keep].sum()), np.sort(keep)


def _cstep_until_stable(y, X, subset, h, max_steps=100):
    coef = lstsq(X[subset], y[subset], what="LTS subset design")
    obj, new = _trimmed((y - X @ coef) ** 2, h)
    for _ in range(max_steps):
        if np.array_equal(new, subset):
            break
        subset = new
        coef = lstsq(X[subset], y[subset], what="LTS subset design")
        obj, new = _trimmed((y - X @ coef) ** 2, h)
    return coef, obj, subset


@lru_cache(maxsize=64)
def _subsets(n, h):
    return np.array(list(itertools.combinations(range(n), h)), dtype=np.intp)


def _batch_ols_rss(y, X, subsets):
    Xs = X[subsets]  # (m, h, r)
    ys = y[subsets]
    G = np.einsum("mhi,mhj->mij", Xs, Xs)
    b = np.einsum("mhi,mh->mi", Xs, ys)
    ev = np.linalg.eigvalsh(G)
    ok = ev[:, 0] > 1e-12 * np.maximum(ev[:, -1], 1e-300)
    rss = np.full(len(subsets), np.inf)
    if ok.any():
        coef = np.linalg.solve(G[ok], b[ok][..., None])[..., 0]
        res = ys[ok] - np.einsum("mhi,mi->mh", Xs[ok], coef)
        rss[ok] = np.einsum("mh,mh->m", res, res)
    return rss


def _exhaustive(y, X, h):
    n = len(y)
    subsets = _subsets(n, h)
    best, best_val = -1, np.inf
    for start in range(0, len(subsets), _CHUNK):
        rss = _batch_ols_rss(y, X, subsets[start : start + _CHUNK])
        j = int(np.argmin(rss))
        # strict inequality keeps the lowest-index subset on ties
        if rss[j] < best_val:
            best, best_val = start + j, rss[j]
    if best < 0:
        raise NumericalError("every h-subset of the LTS design is rank deficient")
    return _cstep_until_stable(y, X, subsets[best], h)


def _fast(y, X, h, n_starts, n_keep, seed):
    n, r = X.shape
    rng = np.random.default_rng(seed)
    cands = []
    for _ in range(n_starts):
        perm = rng.permutation(n)
        k = r
        while True:
            sub = perm[:k]
            Xs = X[sub]
            if k >= n or np.linalg.matrix_rank(Xs) == r:
                break
            k += 1
        try:
            coef = lstsq(Xs, y[sub])
        except NumericalError:
            continue
        obj, subset = _trimmed((y - X @ coef) ** 2, h)
        for _ in range(2):
            coef = lstsq(X[subset], y[subset])
            obj, subset = _trimmed((y - X @ coef) ** 2, h)
        cands.append((obj, tuple(subset)))
    if not cands:
        raise NumericalError("no nonsingular elemental start found for FAST-LTS")
    seen, best = set(), None
    for obj, subset in sorted(cands):
        if subset in seen:
            continue
        seen.add(subset)
        try:
            coef, obj, sub = _cstep_until_stable(y, X, np.array(subset), h)
        except NumericalError:
            continue
        if best is None or obj < best[1]:
            best = (coef, obj, sub)
        if len(seen) >= n_keep:
            break
    if best is None:
        raise NumericalError("FAST-LTS refinement failed on all retained starts")
    return best


def lts_regress(
    response,
    design,
    h: int | None = None,
    *,
    method: str = "auto",
    exhaustive_cap: int = EXHAUSTIVE_CAP,
    n_starts: int = N_STARTS,
    seed: int = 0,
) -> LtsFit:
    """Minimise the sum of the ``h`` smallest squared residuals of ``response - design @ coef``.

    Parameters
    ----------
    response : array_like, shape (N,)
    design : array_like, shape (N, r)
        No intercept column is added.
    h : int, optional
        Number of retained residuals, ``r + 1 <= h <= N``; defaults to
        ``N // 2 + 1``.
    method : {"auto", "exact", "fast"}
        ``auto`` enumerates all h-subsets when there are at most
        ``exhaustive_cap`` of them and otherwise runs FAST-LTS.
    n_starts, seed
        FAST-LTS elemental starts and RNG seed.
    """
    y = np.asarray(response, dtype=float).ravel()
    X = np.asarray(design, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, r = X.shape
    if len(y) != n:
        raise ValidationError(f"response has {len(y)} entries, design has {n} rows")
    h = default_h(n) if h is None else int(h)
    if not r + 1 <= h <= n:
        raise ValidationError(f"h={h} outside [{r + 1}, {n}] for {r} regressors and {n} observations")
    lstsq(X, y, what="LTS design")  # full column rank check
    if method not in ("auto", "exact", "fast"):
        raise ValidationError(f"unknown LTS method {method!r}")
    exact = method == "exact" or (method == "auto" and comb(n, h) <= exhaustive_cap)
    if exact:
        coef, obj, subset = _exhaustive(y, X, h)
    else:
        coef, obj, subset = _fast(y, X, h, n_starts, N_KEEP, seed)
    res = y - X @ coef
    obj, inliers = _trimmed(res**2, h)
    return LtsFit(coef, obj, h, res, tuple(int(i) for i in inliers), exact)
