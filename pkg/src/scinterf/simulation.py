"""Monte Carlo study: AR(2) factor-model panels, comparators, bias and coverage.

Every replication draws from a stream seeded by ``(master_seed, rep)``, so
results do not depend on the number of worker processes.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .errors import SCIError, ValidationError
from .estimator import estimate_average_effects
from .inference import block_bootstrap, default_block_len
from .panel import Panel, split_means

LOADINGS = 0.5 * np.array(
    [
        [1.5, -0.5, 1, 1, 1, -1, 1, -1, 1.5, -1.5],
        [0.5, 1.5, 1, -1, 2, 1, 1, 1, 1, 1],
    ]
).T
ALPHA0 = np.zeros(2)
ALPHA1 = np.ones(2)
AR_COEF = (0.2, 0.1)
BURN_IN = 100
INTERFERENCE_SCALE = 0.75
FAILURE_BUDGET = 0.02
LEVEL = 0.95


@dataclass(frozen=True)
class SimConfig:
    """One simulation cell.  ``T = 2 * t0``; units ``0..n_interfered-1`` are affected."""

    n_units: int = 10
    t0: int = 200
    n_interfered: int = 2
    r_fit: int = 2
    n_reps: int = 300
    n_boot: int = 200
    block_len: int | None = None
    master_seed: int = 0
    fix_selection: bool = False
    loadings: tuple | None = None

    def __post_init__(self):
        if self.t0 < 2:
            raise ValidationError(f"t0 must be >= 2, got {self.t0}")
        if not 1 <= self.n_interfered <= self.n_units:
            raise ValidationError(f"n_interfered={self.n_interfered} outside [1, {self.n_units}]")
        if self.n_reps < 1:
            raise ValidationError("n_reps must be positive")
        if self.n_boot and self.n_boot < 50:
            raise ValidationError("n_boot must be 0 (no bootstrap) or >= 50")
        if self.loadings is None and self.n_units != LOADINGS.shape[0]:
            raise ValidationError(f"built-in loadings cover {LOADINGS.shape[0]} units; pass loadings for n_units={self.n_units}")
        if self.loadings is not None:
            L = np.asarray(self.loadings, dtype=float)
            if L.ndim != 2 or L.shape[0] != self.n_units:
                raise ValidationError(f"loadings must be n_units x r, got {L.shape}")
            object.__setattr__(self, "loadings", tuple(map(tuple, L.tolist())))

    @property
    def T(self) -> int:
        return 2 * self.t0

    @property
    def loading_matrix(self) -> np.ndarray:
        return LOADINGS if self.loadings is None else np.asarray(self.loadings, dtype=float)

    def block_length(self) -> int:
        return self.block_len if self.block_len is not None else default_block_len(self.T)

    @classmethod
    def from_dict(cls, d: dict) -> SimConfig:
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown SimConfig keys {sorted(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(str(exc)) from None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def direct_effect_path(t0: int) -> np.ndarray:
    """Direct effect of the treated unit at post periods t = t0+1 .. 2*t0 (1-based time).

    A ramp with a growing oscillation for the first 12 periods, then a level of
    4 plus a unit-amplitude oscillation of period 24.
    """
    t = np.arange(t0 + 1, 2 * t0 + 1, dtype=float)
    k = t - t0
    wave = np.sin(np.pi * t / 12.0)
    return np.where(k <= 12, k / 3.0 + wave * k, 4.0 + wave)


def effect_matrix(config: SimConfig) -> np.ndarray:
    """N x T matrix of true effects (zero before the intervention)."""
    beta = np.zeros((config.n_units, config.T))
    path = direct_effect_path(config.t0)
    beta[0, config.t0 :] = path
    beta[1 : config.n_interfered, config.t0 :] = INTERFERENCE_SCALE * path
    return beta


def ar2_noise(rng: np.random.Generator, n: int, T: int, burn_in: int = BURN_IN) -> np.ndarray:
    """n independent AR(2) series of length T with standard normal innovations."""
    innov = rng.standard_normal((n, T + burn_in))
    a1, a2 = AR_COEF
    return signal.lfilter([1.0], [1.0, -a1, -a2], innov, axis=1)[:, burn_in:]


def rep_rng(master_seed: int, rep: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([master_seed, rep, stream])


def simulate_panel(config: SimConfig, rep: int):
    """Draw replication ``rep``.

    Returns
    -------
    panel : Panel
    truth : ndarray
        Post-period average effect per unit.
    true_set : tuple
        Units with no effect in any post period.
    """
    rng = rep_rng(config.master_seed, rep)
    L = config.loading_matrix
    n, T, t0 = config.n_units, config.T, config.t0
    X = (np.arange(T) >= t0).astype(float)
    w = ar2_noise(rng, L.shape[1], T)
    eps = ar2_noise(rng, n, T)
    a0 = np.zeros(L.shape[1]) if config.loadings is not None else ALPHA0
    a1 = np.ones(L.shape[1]) if config.loadings is not None else ALPHA1
    F = np.outer(a1, X) + np.outer(a0, 1 - X) + w
    beta = effect_matrix(config)
    Y = beta + L @ F + eps
    panel = Panel(Y, t0, tuple(f"u{i + 1}" for i in range(n)))
    truth = beta[:, t0:].mean(axis=1)
    true_set = tuple(int(i) for i in np.flatnonzero(np.all(beta[:, t0:] == 0, axis=1)))
    return panel, truth, true_set


def md_estimate(panel: Panel) -> np.ndarray:
    """Raw post-minus-pre mean difference per unit."""
    return split_means(panel)[2]


def did_estimate(panel: Panel, controls) -> float:
    """Treated unit's mean change minus the average mean change of ``controls``."""
    controls = [int(j) for j in controls]
    if not controls:
        raise ValidationError("difference-in-differences needs at least one control")
    if 0 in controls:
        raise ValidationError("the treated unit cannot be its own control")
    d = md_estimate(panel)
    return float(d[0] - d[controls].mean())


def run_rep(config: SimConfig, rep: int) -> dict:
    """One replication: SCI (with bootstrap when ``n_boot > 0``), MD and both DID scenarios."""
    panel, truth, true_set = simulate_panel(config, rep)
    n = config.n_units
    md = md_estimate(panel)
    row = {
        "rep": rep,
        "ok": True,
        "truth": truth.tolist(),
        "md": md.tolist(),
        "did_all": did_estimate(panel, range(1, n)),
        "did_valid": did_estimate(panel, [j for j in true_set if j != 0]),
    }
    try:
        est = estimate_average_effects(panel, config.r_fit)
        row["sci"] = est.beta_hat.tolist()
        row["selected_exact"] = set(est.selected_controls) == set(true_set)
        row["n_selected"] = len(est.selected_controls)
        if config.n_boot:
            bs = block_bootstrap(
                panel,
                config.r_fit,
                config.n_boot,
                config.block_length(),
                (LEVEL,),
                seed=int(np.random.SeedSequence([config.master_seed, rep, 1]).generate_state(1)[0]),
                estimate=est,
                fix_selection=config.fix_selection,
            )
            lo, hi = bs.intervals[LEVEL].T
            row["se"] = bs.se.tolist()
            row["covered"] = ((lo <= truth) & (truth <= hi)).tolist()
            row["retries"] = bs.retries
    except SCIError as exc:
        row["ok"] = False
        row["error"] = str(exc)
    return row


def _run_rep_args(args):
    return run_rep(*args)


def _summary(errors: np.ndarray) -> dict:
    q25, med, q75 = np.quantile(errors, [0.25, 0.5, 0.75])
    return {
        "mean": float(errors.mean()),
        "median": float(med),
        "q25": float(q25),
        "q75": float(q75),
        "median_abs": float(np.median(np.abs(errors))),
        "rmse": float(np.sqrt(np.mean(errors**2))),
        "sd": float(errors.std(ddof=1)) if len(errors) > 1 else 0.0,
        "n": int(len(errors)),
    }


@dataclass
class SimReport:
    """Aggregates of one :class:`SimConfig` run.

    ``bias`` maps estimator name to unit label to a summary of
    ``estimate - truth``; ``coverage`` maps unit label to
    ``{"coverage", "mc_se", "n"}`` for the SCI Wald interval.  ``runtime``
    is kept out of :meth:`to_dict` so serialised reports are reproducible.
    """

    config: SimConfig
    bias: dict
    coverage: dict
    selection_accuracy: float
    n_failed: int
    rows: list = field(repr=False, default_factory=list)
    runtime: dict = field(default_factory=dict)

    @property
    def estimator_name(self) -> str:
        return f"SCI(r={self.config.r_fit})"

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "estimator": self.estimator_name,
            "bias": self.bias,
            "coverage": self.coverage,
            "selection_accuracy": self.selection_accuracy,
            "n_failed": self.n_failed,
        }

    def coverage_rows(self) -> list:
        c = self.config
        return [
            {
                "estimator": self.estimator_name,
                "n_interfered": c.n_interfered,
                "t0": c.t0,
                "r_fit": c.r_fit,
                "unit": unit,
                "coverage": v["coverage"],
                "mc_se": v["mc_se"],
                "n": v["n"],
            }
            for unit, v in self.coverage.items()
        ]

    def bias_rows(self) -> list:
        c = self.config
        out = []
        for est, units in self.bias.items():
            for unit, s in units.items():
                out.append({"estimator": est, "n_interfered": c.n_interfered, "t0": c.t0, "r_fit": c.r_fit, "unit": unit, **s})
        return out


def report_units(n: int) -> tuple:
    """Units summarised in reports: treated, first control, last control."""
    return (0, 1, n - 1)


def aggregate(config: SimConfig, rows: list) -> SimReport:
    n = config.n_units
    ok = [r for r in rows if r["ok"]]
    failed = len(rows) - len(ok)
    if failed > FAILURE_BUDGET * len(rows):
        raise SCIError(f"{failed} of {len(rows)} replications failed (budget {FAILURE_BUDGET:.0%})")
    units = report_units(n)
    labels = {i: f"u{i + 1}" for i in units}
    truth_all = np.array([r["truth"] for r in rows])
    bias = {}
    if ok:
        truth = np.array([r["truth"] for r in ok])
        sci = np.array([r["sci"] for r in ok])
        bias["SCI"] = {labels[i]: _summary(sci[:, i] - truth[:, i]) for i in units}
    md = np.array([r["md"] for r in rows])
    bias["MD"] = {labels[i]: _summary(md[:, i] - truth_all[:, i]) for i in units}
    bias["DID_all"] = {labels[0]: _summary(np.array([r["did_all"] for r in rows]) - truth_all[:, 0])}
    bias["DID_valid"] = {labels[0]: _summary(np.array([r["did_valid"] for r in rows]) - truth_all[:, 0])}
    coverage = {}
    if config.n_boot and ok:
        cov = np.array([r["covered"] for r in ok], dtype=float)
        for i in units:
            p = float(cov[:, i].mean())
            coverage[labels[i]] = {"coverage": p, "mc_se": float(np.sqrt(p * (1 - p) / len(ok))), "n": len(ok)}
    sel = float(np.mean([r["selected_exact"] for r in ok])) if ok else 0.0
    return SimReport(config, bias, coverage, sel, failed, rows)


def run_experiment(config: SimConfig, n_jobs: int = 1) -> SimReport:
    """Replicate ``config.n_reps`` times and aggregate bias, coverage and selection."""
    start = time.perf_counter()
    tasks = [(config, rep) for rep in range(config.n_reps)]
    if n_jobs <= 1:
        rows = [run_rep(*t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            rows = list(ex.map(_run_rep_args, tasks, chunksize=max(1, len(tasks) // (4 * n_jobs))))
    report = aggregate(config, rows)
    report.runtime = {"seconds": time.perf_counter() - start, "n_jobs": n_jobs}
    return report


def load_configs(path) -> list:
    """Read one config object, a list of them, or ``{"experiments": [...]}``.

    A ``{"grid": {...}, "base": {...}}`` object expands the Cartesian product of
    the grid lists over the base config.
    """
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return configs_from_json(data)


def configs_from_json(data) -> list:
    if isinstance(data, list):
        return [SimConfig.from_dict(d) for d in data]
    if not isinstance(data, dict):
        raise ValidationError("simulation config must be a JSON object or list")
    if "experiments" in data:
        return configs_from_json(data["experiments"])
    if "grid" in data:
        base = dict(data.get("base", {}))
        grid = data["grid"]
        keys = sorted(grid)
        return [SimConfig.from_dict({**base, **dict(zip(keys, combo))}) for combo in itertools.product(*(grid[k] for k in keys))]
    return [SimConfig.from_dict(data)]


def grid_configs(n_reps: int = 300, n_boot: int = 200, master_seed: int = 0) -> list:
    """The 12 (N0, t0) cells crossed with r_fit in {2, 1}."""
    return [
        SimConfig(t0=t0, n_interfered=n0, r_fit=r, n_reps=n_reps, n_boot=n_boot, master_seed=master_seed)
        for n0 in (1, 2, 3, 4)
        for t0 in (50, 100, 200)
        for r in (2, 1)
    ]
