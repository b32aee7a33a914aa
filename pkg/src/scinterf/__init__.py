"""Synthetic control estimation that tolerates interference on control units."""

__version__ = "0.1.0"

from .dynamic import DynamicEffects, TrendModel, TrendSpec, estimate_dynamic_effects, fit_trend
from .errors import ConvergenceError, NumericalError, ParseError, SCIError, StepError, ValidationError
from .estimator import (
    CovariateAdjustment,
    EffectEstimate,
    estimate_average_effects,
    estimate_from_fit,
    estimate_sigma,
    refit,
    residualize_covariates,
    select_controls,
    selection_threshold,
    synthetic_weights,
)
from .factor import FactorFit, fit_factors, suggest_r
from .inference import BootstrapResult, block_bootstrap, default_block_len
from .panel import CovariatePanel, Panel, load_covariates, load_panel, placebo_split, split_means, write_panel
from .robust import LtsFit, lts_breakdown_check, lts_regress
from .simulation import SimConfig, SimReport, did_estimate, md_estimate, run_experiment, simulate_panel
