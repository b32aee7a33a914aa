"""Outcome panels: validation, CSV ingestion, and the pre/post mean split."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, ValidationError


@dataclass(frozen=True)
class Panel:
    """N units by T periods of outcomes with a single treated unit in row 0.

    Periods ``0..t0-1`` are pre-intervention; the intervention indicator is
    the step function ``t >= t0`` (0-based) and is never stored.
    """

    outcomes: np.ndarray
    t0: int
    unit_labels: tuple[str, ...]
    period_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        y = np.array(self.outcomes, dtype=float)
        if y.ndim != 2:
            raise ValidationError(f"outcomes must be 2-D, got shape {y.shape}")
        n, T = y.shape
        if not np.all(np.isfinite(y)):
            i, t = np.argwhere(~np.isfinite(y))[0]
            raise ValidationError(f"non-finite outcome at unit {i}, period {t}")
        if n < 3:
            raise ValidationError(f"need at least 3 units, got {n}")
        t0 = int(self.t0)
        if not 1 <= t0 <= T - 1:
            raise ValidationError(f"t0={t0} outside [1, {T - 1}]")
        labels = tuple(str(u) for u in self.unit_labels)
        if len(labels) != n:
            raise ValidationError(f"{len(labels)} unit labels for {n} units")
        if len(set(labels)) != n:
            raise ValidationError("duplicate unit labels")
        periods = self.period_labels
        if periods is not None:
            periods = tuple(str(p) for p in periods)
            if len(periods) != T:
                raise ValidationError(f"{len(periods)} period labels for {T} periods")
        y.setflags(write=False)
        object.__setattr__(self, "outcomes", y)
        object.__setattr__(self, "t0", t0)
        object.__setattr__(self, "unit_labels", labels)
        object.__setattr__(self, "period_labels", periods)

    @property
    def n_units(self) -> int:
        return self.outcomes.shape[0]

    @property
    def n_periods(self) -> int:
        return self.outcomes.shape[1]

    @property
    def n_post(self) -> int:
        return self.n_periods - self.t0

    @property
    def rho(self) -> float:
        """Pre-intervention share t0 / T."""
        return self.t0 / self.n_periods

    @property
    def pre(self) -> np.ndarray:
        return self.outcomes[:, : self.t0]

    @property
    def post(self) -> np.ndarray:
        return self.outcomes[:, self.t0 :]

    def with_outcomes(self, outcomes) -> Panel:
        """Same labels and t0, new outcome matrix of identical shape."""
        outcomes = np.asarray(outcomes, dtype=float)
        if outcomes.shape != self.outcomes.shape:
            raise ValidationError(f"shape {outcomes.shape} != {self.outcomes.shape}")
        return Panel(outcomes, self.t0, self.unit_labels, self.period_labels)


@dataclass(frozen=True)
class CovariatePanel:
    """p covariates by T periods, aligned with a companion Panel."""

    covariates: np.ndarray
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        c = np.array(self.covariates, dtype=float)
        if c.ndim == 1:
            c = c[None, :]
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValidationError(f"covariates must be p x T with p >= 1, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValidationError("covariates contain non-finite entries")
        names = self.names
        if names is not None:
            names = tuple(str(s) for s in names)
            if len(names) != c.shape[0]:
                raise ValidationError(f"{len(names)} names for {c.shape[0]} covariates")
        c.setflags(write=False)
        object.__setattr__(self, "covariates", c)
        object.__setattr__(self, "names", names)

    @property
    def p(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_periods(self) -> int:
        return self.covariates.shape[1]


_PERIOD_HEADERS = {"", "period", "periods", "time", "t", "date", "day", "week", "month", "quarter", "year"}


def _looks_numeric(s):
    try:
        float(s)
    except ValueError:
        return False
    return True


def read_wide_csv(path):
    """Parse a wide CSV into (column labels, period labels or None, T x k values).

    The first column is taken as period labels when its header is empty or a
    common time name (``period``, ``week``, ``date`` ...), or when any of its
    cells is non-numeric.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8-sig") as fh:
        rows = list(csv.reader(fh))
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if len(rows) < 2:
        raise ParseError(f"{path}: need a header row and at least one data row")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    first = [r[0].strip() if r else "" for r in body]
    has_period = header[0].lower() in _PERIOD_HEADERS or not all(_looks_numeric(v) for v in first if v)
    labels = header[1:] if has_period else header
    offset = 1 if has_period else 0
    if not labels:
        raise ParseError(f"{path}: no unit columns")
    values = np.empty((len(body), len(labels)))
    for i, row in enumerate(body, start=1):
        if len(row) != len(header):
            raise ParseError(
                f"{path}: data row {i} has {len(row)} cells, header has {len(header)}", row=i
            )
        for j, label in enumerate(labels):
            cell = row[j + offset].strip()
            if cell == "":
                raise ParseError(f"{path}: empty cell at row {i}, column {label!r}", row=i, column=label)
            try:
                v = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}: non-numeric value {cell!r} at row {i}, column {label!r}",
                    row=i,
                    column=label,
                ) from None
            if not math.isfinite(v):
                raise ParseError(f"{path}: non-finite value at row {i}, column {label!r}", row=i, column=label)
            values[i - 1, j] = v
    if len(set(labels)) != len(labels):
        dupes = sorted({u for u in labels if labels.count(u) > 1})
        raise ValidationError(f"{path}: duplicate unit labels {dupes}")
    periods = tuple(first) if has_period else None
    return labels, periods, values


def load_panel(path, t0: int, treated: str) -> Panel:
    """Read a wide CSV (rows = periods, columns = units) into a Panel.

    The treated unit is moved to row 0; the remaining units keep their file
    order.
    """
    labels, periods, values = read_wide_csv(path)
    if treated not in labels:
        raise ValidationError(f"treated unit {treated!r} not among columns {labels}")
    k = labels.index(treated)
    order = [k] + [j for j in range(len(labels)) if j != k]
    return Panel(values[:, order].T, t0, tuple(labels[j] for j in order), periods)


def load_covariates(path, panel: Panel | None = None) -> CovariatePanel:
    names, _, values = read_wide_csv(path)
    cov = CovariatePanel(values.T, tuple(names))
    if panel is not None and cov.n_periods != panel.n_periods:
        raise ValidationError(f"covariates have {cov.n_periods} periods, panel has {panel.n_periods}")
    return cov


def write_panel(panel: Panel, path) -> None:
    """Write a Panel as wide CSV; values use ``repr`` so reloading is exact."""
    periods = panel.period_labels or tuple(str(t + 1) for t in range(panel.n_periods))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["period", *panel.unit_labels])
        for t, p in enumerate(periods):
            w.writerow([p, *(repr(float(v)) for v in panel.outcomes[:, t])])


def split_means(panel: Panel):
    """Pre-period mean, post-period mean, and their difference per unit."""
    pre = panel.pre.mean(axis=1)
    post = panel.post.mean(axis=1)
    return pre, post, post - pre


def placebo_split(panel: Panel, placebo_t0: int) -> Panel:
    """Pre-intervention sub-panel with a fake intervention after ``placebo_t0`` periods."""
    if not 1 <= placebo_t0 < panel.t0:
        raise ValidationError(f"placebo_t0={placebo_t0} must lie in [1, {panel.t0 - 1}]")
    periods = panel.period_labels[: panel.t0] if panel.period_labels else None
    return Panel(panel.pre, placebo_t0, panel.unit_labels, periods)
