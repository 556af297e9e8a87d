"""Pairwise treatment-effect estimation under multi-level treatments.

The package estimates all pairwise average treatment effects on a common
population using the generalized propensity score: matching and
subclassification on per-level scores, inverse-probability weighting,
covariate matching, overlap trimming, balance diagnostics, and a Monte
Carlo harness that scores estimators by bias, RMSE, and CI coverage.
"""

from .balance import (
    BalanceReport,
    balance_report,
    normalized_diff_cov,
    normalized_diff_gps,
    overlap_histogram,
)
from .dataset import CsvSchema, Dataset, UnitMask, apply_mask, load_csv, save_csv
from .errors import (
    ConfigError,
    ConvergenceError,
    DataError,
    EmptyCellError,
    MultitreatError,
    NumericalError,
    SeparationError,
)
from .estimators import (
    ALL_METHODS,
    PER_ARM_MEAN_METHODS,
    EffectEstimate,
    ImputedOutcomes,
    contrast_pairs,
    effects_from_imputation,
    estimate_cov,
    estimate_dif,
    estimate_gpsm,
    estimate_gpss,
    estimate_ppsm,
    estimate_ppsm_all,
    estimate_pssm,
    estimate_weighting,
    estimates_to_csv,
    estimates_to_json,
    hajek_weights,
    impute_matrix,
    max_hajek_weight,
    ppsm_components,
)
from .gps import (
    GpsModel,
    ScoreMatrix,
    fit_multinomial_logit,
    model_from_json,
    model_to_json,
    predict_scores,
    true_scores,
)
from .inference import CiResult, CiSpec, bootstrap_ci, matching_variance
from .matching import (
    MatchAssignment,
    MatchSpec,
    mahalanobis_matrix,
    match_covariates,
    match_scalar,
    match_vector,
)
from .simulation import (
    MonteCarloSummary,
    RunOptions,
    SimulationDesign,
    TrueEffects,
    design1,
    design2,
    design_by_name,
    draw_covariates,
    generate,
    generate_design1,
    generate_design2,
    run_monte_carlo,
    score_summary,
    summary_to_csv,
    summary_to_json,
)
from .trimming import TrimResult, find_lambda, summed_inverse_scores, trim

__version__ = "0.1.0"
