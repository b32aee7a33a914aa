"""Command-line interface: ``scinterf {estimate,placebo,dynamic,simulate}``.

Exit codes: 0 success, 2 invalid input, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from importlib import resources
from pathlib import Path

from . import __version__
from .dynamic import TrendSpec, estimate_dynamic_effects
from .errors import SCIError, StepError, ValidationError
from .estimator import estimate_average_effects, residualize_covariates
from .factor import check_factor_dof
from .inference import block_bootstrap, resolve_jobs
from .panel import load_covariates, load_panel, placebo_split
from .robust import default_h, lts_breakdown_check
from .simulation import load_configs, run_experiment, configs_from_json

SCHEMA_VERSION = "1.0"
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


def _levels(text):
    try:
        return tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad levels {text!r}") from None


def _panel_args(p):
    p.add_argument("--input", required=True, help="wide CSV: rows are periods, columns are units")
    p.add_argument("--t0", type=int, required=True, help="number of pre-intervention periods")
    p.add_argument("--treated", required=True, help="column label of the treated unit")
    p.add_argument("--r", type=int, required=True, help="number of latent factors")
    p.add_argument("--h", type=int, default=None, help="LTS trimming count (default N//2 + 1)")
    p.add_argument("--covariates", default=None, help="wide CSV of covariates aligned by period")
    p.add_argument("--output", required=True, help="JSON report path")


def _bootstrap_args(p):
    p.add_argument("--bootstrap", type=int, default=0, metavar="B", help="bootstrap replicates (0 = none)")
    p.add_argument("--block-len", type=int, default=None)
    p.add_argument("--levels", type=_levels, default=(0.90, 0.95))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fix-selection", action="store_true", help="keep the point estimate's control set in replicates")
    p.add_argument("--threads", type=int, default=None, help="worker processes (fallback: SCI_THREADS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scinterf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="average direct and interference effects")
    _panel_args(p)
    _bootstrap_args(p)

    p = sub.add_parser("placebo", help="falsification run with a fake intervention date")
    _panel_args(p)
    _bootstrap_args(p)
    p.add_argument("--placebo-t0", type=int, required=True)

    p = sub.add_parser("dynamic", help="per-period effects from a smoothed trend")
    _panel_args(p)
    p.add_argument("--trend", required=True, help="poly:D or sieve:K:S")
    p.add_argument("--csv", default=None, help="per-period table (default: report path with .csv)")

    p = sub.add_parser("simulate", help="Monte Carlo bias and coverage study")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--config", help="SimConfig JSON (object, list, experiments or grid)")
    src.add_argument("--preset", help="bundled config name, e.g. grid or smoke")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None)
    return parser


# flags that choose where or how fast to run, not what is computed
_NOT_ECHOED = {"threads", "output", "csv"}


def _echo(args) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items()) if k not in _NOT_ECHOED}


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _prepare(args, warnings):
    panel = load_panel(args.input, args.t0, args.treated)
    n = panel.n_units
    check_factor_dof(n, args.r)
    h = default_h(n) if args.h is None else args.h
    if not args.r + 1 <= h <= n:
        raise ValidationError(f"h={h} outside [{args.r + 1}, {n}] for r={args.r} and N={n}")
    try:
        budget = lts_breakdown_check(n, args.r)
        warnings.append(f"at most {budget} affected unit(s) tolerated with N={n}, r={args.r}")
    except ValidationError as exc:
        warnings.append(f"{exc}: any affected control unit may bias the estimates")
    if h == n:
        warnings.append("h = N: LTS reduces to ordinary least squares, zero interference budget")
    adjustment = None
    if args.covariates:
        cov = load_covariates(args.covariates, panel)
        adjustment = residualize_covariates(panel, cov)
        panel = adjustment.residual_panel
    return panel, h, adjustment


def _average_report(args, panel, h, adjustment, warnings, kind):
    est = estimate_average_effects(panel, args.r, h)
    warnings.extend(est.notes)
    if est.factor_fit.heywood:
        warnings.append(
            "Heywood case: uniqueness floor binds for "
            + ", ".join(panel.unit_labels[i] for i in est.factor_fit.heywood)
        )
    report = {
        "schema_version": SCHEMA_VERSION,
        "artifact_version": __version__,
        "kind": kind,
        "inputs": _echo(args),
        "panel": {"n_units": panel.n_units, "n_periods": panel.n_periods, "t0": panel.t0, "units": list(panel.unit_labels)},
        "estimate": est.to_dict(panel.unit_labels),
        "warnings": warnings,
    }
    if adjustment is not None:
        report["covariate_coefficients"] = adjustment.u_tilde.tolist()
    if args.bootstrap:
        bs = block_bootstrap(
            panel,
            args.r,
            args.bootstrap,
            args.block_len,
            args.levels,
            args.seed,
            h=h,
            estimate=est,
            fix_selection=args.fix_selection,
            n_jobs=resolve_jobs(args.threads),
        )
        if bs.retries:
            warnings.append(f"bootstrap redrew {bs.retries} failed replicate(s)")
        report["bootstrap"] = bs.to_dict(panel.unit_labels)
    return report


def cmd_estimate(args) -> int:
    warnings = []
    panel, h, adj = _prepare(args, warnings)
    _write_json(args.output, _average_report(args, panel, h, adj, warnings, "estimate"))
    return EXIT_OK


def cmd_placebo(args) -> int:
    warnings = []
    panel, h, adj = _prepare(args, warnings)
    panel = placebo_split(panel, args.placebo_t0)
    report = _average_report(args, panel, h, adj, warnings, "falsification")
    report["placebo"] = {"original_t0": args.t0, "placebo_t0": args.placebo_t0}
    _write_json(args.output, report)
    return EXIT_OK


def cmd_dynamic(args) -> int:
    warnings = []
    panel, h, adj = _prepare(args, warnings)
    spec = TrendSpec.parse(args.trend)
    dyn = estimate_dynamic_effects(panel, args.r, spec, h)
    periods = panel.period_labels[panel.t0 :] if panel.period_labels else [str(t + 1) for t in range(panel.t0, panel.n_periods)]
    report = {
        "schema_version": SCHEMA_VERSION,
        "artifact_version": __version__,
        "kind": "dynamic",
        "inputs": _echo(args),
        "dynamic": dyn.to_dict(panel.unit_labels, periods),
        "warnings": warnings,
    }
    _write_json(args.output, report)
    rows = [
        {
            "period": periods[j],
            "unit": panel.unit_labels[i],
            "beta": repr(float(dyn.beta_t[i, j])),
            "tau_hat": repr(float(dyn.trend.fitted[i, j])),
            "selected": int(i in dyn.selected_t[j]),
        }
        for j in range(panel.n_post)
        for i in range(panel.n_units)
    ]
    _write_csv(args.csv or Path(args.output).with_suffix(".csv"), rows)
    return EXIT_OK


def preset_configs(name):
    try:
        text = resources.files("scinterf.presets").joinpath(f"{name}.json").read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ValidationError(f"unknown preset {name!r}") from None
    return configs_from_json(json.loads(text))


def cmd_simulate(args) -> int:
    configs = preset_configs(args.preset) if args.preset else load_configs(args.config)
    n_jobs = resolve_jobs(args.threads)
    out = Path(args.out)
    reports, coverage, bias, runtime = [], [], [], []
    for cfg in configs:
        rep = run_experiment(cfg, n_jobs=n_jobs)
        reports.append(rep.to_dict())
        coverage.extend(rep.coverage_rows())
        bias.extend(rep.bias_rows())
        runtime.append({"config": cfg.to_dict(), **rep.runtime})
    _write_json(out / "report.json", {"schema_version": SCHEMA_VERSION, "artifact_version": __version__, "experiments": reports})
    _write_csv(out / "coverage.csv", coverage)
    _write_csv(out / "bias.csv", bias)
    _write_json(out / "runtime.json", runtime)
    return EXIT_OK


COMMANDS = {"estimate": cmd_estimate, "placebo": cmd_placebo, "dynamic": cmd_dynamic, "simulate": cmd_simulate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SCIError as exc:
        cause = exc.cause if isinstance(exc, StepError) else exc
        print(f"scinterf {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION if isinstance(cause, ValidationError) else EXIT_NUMERICAL
    except OSError as exc:
        print(f"scinterf {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
