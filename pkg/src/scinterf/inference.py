"""Circular block bootstrap for the average-effect estimator."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import SCIError, ValidationError
from .estimator import EffectEstimate, estimate_average_effects
from .panel import Panel

MAX_FAIL_FACTOR = 10


@dataclass(frozen=True)
class BootstrapResult:
    """Bootstrap replicates of the effect vector and Wald-type intervals.

    ``intervals`` maps each level to an ``(N, 2)`` array of (low, high);
    ``percentile`` holds percentile intervals of the replicates for diagnostics.
    """

    replicates: np.ndarray
    point: np.ndarray
    se: np.ndarray
    intervals: dict
    percentile: dict
    block_len: int
    B: int
    seed: int
    retries: int
    fix_selection: bool = False

    def to_dict(self, unit_labels=None) -> dict:
        n = len(self.point)
        labels = list(unit_labels) if unit_labels is not None else [str(i) for i in range(n)]
        return {
            "B": self.B,
            "block_len": self.block_len,
            "seed": self.seed,
            "retries": self.retries,
            "fix_selection": self.fix_selection,
            "units": [
                {
                    "unit": labels[i],
                    "point": float(self.point[i]),
                    "se": float(self.se[i]),
                    "wald": {f"{lv:g}": [float(v) for v in self.intervals[lv][i]] for lv in self.intervals},
                    "percentile": {f"{lv:g}": [float(v) for v in self.percentile[lv][i]] for lv in self.percentile},
                }
                for i in range(n)
            ],
        }


def default_block_len(T: int) -> int:
    """``max(1, round(T ** (1/3)))``."""
    if T < 4:
        raise ValidationError(f"need T >= 4 for a block length rule, got {T}")
    return max(1, int(round(T ** (1.0 / 3.0))))


def circular_block_indices(m: int, block_len: int, rng: np.random.Generator) -> np.ndarray:
    """Indices ``0..m-1`` resampled as wrap-around blocks, truncated to length m."""
    n_blocks = -(-m // block_len)
    starts = rng.integers(0, m, size=n_blocks)
    idx = (starts[:, None] + np.arange(block_len)[None, :]) % m
    return idx.ravel()[:m]


def resample_periods(panel: Panel, block_len: int, rng: np.random.Generator) -> np.ndarray:
    """Period indices for one replicate: pre and post segments resampled separately."""
    pre = circular_block_indices(panel.t0, block_len, rng)
    post = panel.t0 + circular_block_indices(panel.n_post, block_len, rng)
    return np.concatenate([pre, post])


def _replicate(args):
    panel, r, h, block_len, seed, b, init, selected, cap = args
    rng = np.random.default_rng([seed, b])
    failures = 0
    while True:
        idx = resample_periods(panel, block_len, rng)
        try:
            est = estimate_average_effects(
                panel.with_outcomes(panel.outcomes[:, idx]), r, h, factor_init=init, selected=selected
            )
            return est.beta_hat, failures
        except SCIError:
            failures += 1
            if failures > cap:
                return None, failures


def _run_all(tasks, n_jobs):
    if n_jobs <= 1:
        return [_replicate(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(_replicate, tasks, chunksize=max(1, len(tasks) // (4 * n_jobs))))


def block_bootstrap(
    panel: Panel,
    r: int,
    B: int = 200,
    block_len: int | None = None,
    levels=(0.95,),
    seed: int = 0,
    *,
    h: int | None = None,
    estimate: EffectEstimate | None = None,
    fix_selection: bool = False,
    n_jobs: int = 1,
) -> BootstrapResult:
    """Circular block bootstrap standard errors and Wald intervals.

    Each replicate resamples pre- and post-intervention periods separately in
    wrap-around blocks (whole cross-sections are kept together) and reruns the
    full estimator.  Replicate ``b`` draws from a stream seeded by
    ``(seed, b)``, so results do not depend on ``n_jobs``.  A failed replicate
    is redrawn from the same stream.

    Parameters
    ----------
    estimate : EffectEstimate, optional
        Point estimate on ``panel``; computed if omitted.  Its factor fit
        warm-starts every replicate.
    fix_selection : bool
        Keep the point estimate's control set in every replicate instead of
        re-selecting.
    """
    if B < 50:
        raise ValidationError(f"B must be >= 50, got {B}")
    if block_len is None:
        block_len = default_block_len(panel.n_periods)
    if not 1 <= block_len <= min(panel.t0, panel.n_post):
        raise ValidationError(
            f"block_len={block_len} outside [1, {min(panel.t0, panel.n_post)}]"
        )
    levels = tuple(float(lv) for lv in levels)
    if not all(0 < lv < 1 for lv in levels):
        raise ValidationError(f"levels must lie in (0, 1), got {levels}")
    if estimate is None:
        estimate = estimate_average_effects(panel, r, h)
    selected = estimate.selected_controls if fix_selection else None
    tasks = [(panel, r, h, block_len, seed, b, estimate.factor_fit, selected, MAX_FAIL_FACTOR * B)
             for b in range(B)]
    out = _run_all(tasks, n_jobs)
    retries = sum(f for _, f in out)
    if any(beta is None for beta, _ in out) or retries > MAX_FAIL_FACTOR * B:
        raise SCIError(f"bootstrap aborted: {retries} failed replicate fits for B={B}")
    reps = np.vstack([beta for beta, _ in out])
    point = estimate.beta_hat
    se = reps.std(axis=0, ddof=1)
    intervals, pct = {}, {}
    for lv in levels:
        z = stats.norm.ppf(0.5 + lv / 2)
        intervals[lv] = np.column_stack([point - z * se, point + z * se])
        pct[lv] = np.quantile(reps, [(1 - lv) / 2, (1 + lv) / 2], axis=0).T
    return BootstrapResult(reps, point, se, intervals, pct, int(block_len), int(B), int(seed), int(retries), fix_selection)


def resolve_jobs(n_jobs: int | None) -> int:
    """``n_jobs`` or the ``SCI_THREADS`` environment variable, default 1."""
    if n_jobs is None:
        n_jobs = int(os.environ.get("SCI_THREADS", "1") or 1)
    return max(1, int(n_jobs))
