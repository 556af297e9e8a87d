"""Pairwise average treatment-effect estimators for multi-level treatments.

Seven estimators are provided. DIF, W (inverse-probability weighting with
Hajek normalization), GPSS (subclassification on the scalar score), GPSM
(matching on the scalar score), PSSM (matching on the score vector), and
COV (Mahalanobis covariate matching) all estimate per-arm mean potential
outcomes on a common population and difference them, so their pairwise
effects are antisymmetric and additive by construction. PPSM replicates
the conventional practice of binary propensity-score matching two arms at
a time; its estimates condition on membership in the compared pair and are
deliberately not transitive across pairs.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace

import numpy as np

from .dataset import Dataset
from .errors import DataError, EmptyCellError, NumericalError
from .gps import ScoreMatrix, fit_multinomial_logit, predict_scores
from .matching import (
    MatchAssignment,
    _nearest_rows,
    effective_covariates,
    mahalanobis_matrix,
    match_scalar,
    whiten,
)

# Row order of the simulation study's summary table.
ALL_METHODS = ("DIF", "PPSM", "PSSM", "W", "COV", "GPSM", "GPSS")
PER_ARM_MEAN_METHODS = ("DIF", "PSSM", "W", "COV", "GPSM", "GPSS")

POPULATION_FULL = "full-sample"
POPULATION_TRIMMED = "trimmed-sample"
POPULATION_PAIRWISE = "pairwise-subpopulation"

_NEAR_ZERO_SCORE = 1e-12


@dataclass(frozen=True)
class EffectEstimate:
    """One pairwise effect tau(w, w') = E[Y(w')] - E[Y(w)] with its provenance."""

    w: int
    w_prime: int
    tau_hat: float
    method: str
    population: str
    se: float | None = None
    ci_lower: float | None = None
    ci_upper: float | None = None
    n_used: int | None = None
    per_arm_means: tuple[float, ...] | None = None

    def with_interval(self, se: float, ci_lower: float, ci_upper: float) -> "EffectEstimate":
        return replace(self, se=se, ci_lower=ci_lower, ci_upper=ci_upper)


@dataclass(frozen=True)
class ImputedOutcomes:
    """All N x T imputed potential outcomes plus the matches that produced them.

    ``match_index[i, w-1]`` is the donor whose observed outcome fills cell
    (i, w); own-arm cells are self-matches, so column W_i of row i always
    equals the observed outcome. ``matching_values[w]`` records the variable
    units were matched on for arm w (needed by the matched-sample variance).
    """

    values: np.ndarray
    match_index: np.ndarray
    method: str
    matching_values: dict[int, np.ndarray]


def contrast_pairs(T: int) -> list[tuple[int, int]]:
    return [(w, v) for w in range(1, T + 1) for v in range(w + 1, T + 1)]


def _estimates_from_means(means, method, population, n_used):
    means = tuple(float(v) for v in means)
    return [
        EffectEstimate(
            w=w,
            w_prime=v,
            tau_hat=means[v - 1] - means[w - 1],
            method=method,
            population=population,
            n_used=n_used,
            per_arm_means=means,
        )
        for w, v in contrast_pairs(len(means))
    ]


def impute_matrix(
    d: Dataset,
    method: str,
    scores: ScoreMatrix | None = None,
    V: np.ndarray | None = None,
) -> ImputedOutcomes:
    """Impute every unit's potential outcome under every level by 1-NN matching.

    ``method`` selects the matching variable: "covariates" (Mahalanobis),
    "gps-scalar" (per-arm score p(w|x)), or "gps-vector" (the T-1 score
    vector). Own-arm cells are filled by the unit itself: the donor pool
    includes the unit, whose distance to itself is zero.
    """
    N, T = d.n_units, d.T
    match_index = np.empty((N, T), dtype=int)
    matching_values: dict[int, np.ndarray] = {}

    if method == "covariates":
        if V is None:
            V = mahalanobis_matrix(d)
        Z = whiten(effective_covariates(d), V)
        for w in range(1, T + 1):
            pool = d.arm_indices(w)
            others = np.flatnonzero(d.treatment != w)
            am, _ = _nearest_rows(Z[others], Z[pool])
            match_index[others, w - 1] = pool[am]
            matching_values[w] = Z
    elif method == "gps-scalar":
        if scores is None:
            raise DataError("gps-scalar imputation requires a score matrix")
        for w in range(1, T + 1):
            col = scores.column(w)
            assign = match_scalar(col, col, d.treatment, w)
            match_index[:, w - 1] = assign.indices
            matching_values[w] = col
    elif method == "gps-vector":
        if scores is None:
            raise DataError("gps-vector imputation requires a score matrix")
        M = scores.scores[:, : T - 1]
        for w in range(1, T + 1):
            pool = d.arm_indices(w)
            others = np.flatnonzero(d.treatment != w)
            am, _ = _nearest_rows(M[others], M[pool])
            match_index[others, w - 1] = pool[am]
            matching_values[w] = M
    else:
        raise DataError(f"unknown imputation method {method!r}")

    # Self-match: a unit is always its own nearest donor within its arm.
    rows = np.arange(N)
    match_index[rows, d.treatment - 1] = rows
    return ImputedOutcomes(
        values=d.outcome[match_index],
        match_index=match_index,
        method=method,
        matching_values=matching_values,
    )


def effects_from_imputation(
    d: Dataset, imputed: ImputedOutcomes, method: str, population: str = POPULATION_FULL
) -> list[EffectEstimate]:
    means = imputed.values.mean(axis=0)
    return _estimates_from_means(means, method, population, d.n_units)


def estimate_dif(d: Dataset, population: str = POPULATION_FULL) -> list[EffectEstimate]:
    """Simple difference in mean observed outcomes between arms."""
    means = [d.outcome[d.treatment == w].mean() for w in range(1, d.T + 1)]
    return _estimates_from_means(means, "DIF", population, d.n_units)


def estimate_cov(
    d: Dataset, V: np.ndarray | None = None, population: str = POPULATION_FULL
) -> list[EffectEstimate]:
    """Covariate matching under the Mahalanobis metric, averaged over all units."""
    return effects_from_imputation(d, impute_matrix(d, "covariates", V=V), "COV", population)


def estimate_gpsm(
    d: Dataset, scores: ScoreMatrix, population: str = POPULATION_FULL
) -> list[EffectEstimate]:
    """Matching on the scalar score p(w|x) separately per target level."""
    return effects_from_imputation(d, impute_matrix(d, "gps-scalar", scores=scores), "GPSM", population)


def estimate_pssm(
    d: Dataset, scores: ScoreMatrix, population: str = POPULATION_FULL
) -> list[EffectEstimate]:
    """Matching on the full (T-1)-dimensional score vector."""
    return effects_from_imputation(d, impute_matrix(d, "gps-vector", scores=scores), "PSSM", population)


def estimate_weighting(
    d: Dataset,
    scores: ScoreMatrix,
    clip: float | None = None,
    horvitz_thompson: bool = False,
    population: str = POPULATION_FULL,
) -> list[EffectEstimate]:
    """Inverse-probability weighting with Hajek normalization per arm.

    ``clip`` floors the scores before weighting; the default (None) makes
    near-zero scores a loud error naming the offending unit rather than a
    silently enormous weight. ``horvitz_thompson`` divides by N instead of
    the summed weights, for comparison.
    """
    means = []
    for w in range(1, d.T + 1):
        arm = d.arm_indices(w)
        p = scores.column(w)[arm]
        if clip is not None:
            p = np.maximum(p, clip)
        elif np.any(p < _NEAR_ZERO_SCORE):
            i = arm[int(np.argmin(p))]
            raise NumericalError(
                f"unit {i} has score p({w}|x) = {p.min():.3e} below {_NEAR_ZERO_SCORE}; "
                "enable clipping or trim the sample"
            )
        inv = 1.0 / p
        if horvitz_thompson:
            means.append((d.outcome[arm] * inv).sum() / d.n_units)
        else:
            means.append((d.outcome[arm] * inv).sum() / inv.sum())
    return _estimates_from_means(means, "W", population, d.n_units)


def gpss_arm_mean(
    d: Dataset, scores: ScoreMatrix, w: int, subclasses: int = 5
) -> float:
    """Subclassification estimate of E[Y(w)] on quantiles of p(w|x).

    Subclass boundaries are the sample quantiles of p(w|x) over all units
    (q_0 = 0, q_J = 1, membership q_{j-1} < p <= q_j). Each subclass is
    weighted by its total unit share N_j / N; subclasses emptied by tied
    boundaries carry zero weight and are skipped, but a populated subclass
    with no arm-w units is an error.
    """
    col = scores.column(w)
    J = subclasses
    edges = np.quantile(col, np.arange(1, J) / J)
    strata = np.searchsorted(edges, col, side="left")
    n_total = np.bincount(strata, minlength=J)
    arm = d.arm_indices(w)
    n_arm = np.bincount(strata[arm], minlength=J)
    empty = (n_total > 0) & (n_arm == 0)
    if empty.any():
        cells = [(int(j) + 1, w) for j in np.flatnonzero(empty)]
        raise EmptyCellError(
            f"subclass cells {cells} (subclass, level) contain no treated units; "
            "trim the sample or reduce the subclass count",
            cells=cells,
        )
    sums = np.bincount(strata[arm], weights=d.outcome[arm], minlength=J)
    occupied = n_total > 0
    mu = sums[occupied] / n_arm[occupied]
    return float((n_total[occupied] / d.n_units) @ mu)


def estimate_gpss(
    d: Dataset,
    scores: ScoreMatrix,
    subclasses: int = 5,
    population: str = POPULATION_FULL,
) -> list[EffectEstimate]:
    """Subclassification on the scalar score, one stratification per level."""
    means = [gpss_arm_mean(d, scores, w, subclasses) for w in range(1, d.T + 1)]
    return _estimates_from_means(means, "GPSS", population, d.n_units)


def pair_subsample(d: Dataset, w: int, w_prime: int) -> tuple[Dataset, np.ndarray]:
    """Restrict to units in arms {w, w'} and relabel them 1 and 2.

    Returns the restricted dataset and the original row indices.
    """
    if w == w_prime:
        raise DataError("pair must name two distinct treatment levels")
    keep = np.flatnonzero((d.treatment == w) | (d.treatment == w_prime))
    labels = np.where(d.treatment[keep] == w, 1, 2)
    sub = Dataset(
        covariates=d.covariates[keep],
        treatment=labels,
        outcome=d.outcome[keep],
        covariate_names=list(d.covariate_names),
        treatment_labels=[d.label_for(w), d.label_for(w_prime)],
        has_intercept=d.has_intercept,
    )
    return sub, keep


def ppsm_components(
    d: Dataset, pair: tuple[int, int], **fit_options
) -> tuple[EffectEstimate, ImputedOutcomes, Dataset]:
    """Pairwise binary propensity-score matching with a freshly fitted score.

    A binary logit is fit on the two-arm subsample alone, every restricted
    unit is matched into both arms on that score, and the imputed
    differences are averaged over the subsample. The estimate therefore
    targets the pair subpopulation, not the common population.
    """
    w, w_prime = pair
    sub, _ = pair_subsample(d, w, w_prime)
    model = fit_multinomial_logit(sub, **fit_options)
    scores = predict_scores(model, sub)
    imputed = impute_matrix(sub, "gps-scalar", scores=scores)
    tau = float((imputed.values[:, 1] - imputed.values[:, 0]).mean())
    estimate = EffectEstimate(
        w=w,
        w_prime=w_prime,
        tau_hat=tau,
        method="PPSM",
        population=POPULATION_PAIRWISE,
        n_used=sub.n_units,
    )
    return estimate, imputed, sub


def estimate_ppsm(d: Dataset, pair: tuple[int, int], **fit_options) -> EffectEstimate:
    """Pairwise binary propensity-score matching for one contrast."""
    estimate, _, _ = ppsm_components(d, pair, **fit_options)
    return estimate


def estimate_ppsm_all(d: Dataset, **fit_options) -> list[EffectEstimate]:
    return [estimate_ppsm(d, pair, **fit_options) for pair in contrast_pairs(d.T)]


def hajek_weights(d: Dataset, scores: ScoreMatrix, w: int) -> np.ndarray:
    """Arm-w inverse-score weights normalized to sum to the arm size."""
    arm = d.arm_indices(w)
    inv = 1.0 / scores.column(w)[arm]
    return inv * (arm.size / inv.sum())


def max_hajek_weight(d: Dataset, scores: ScoreMatrix) -> float:
    """Largest normalized weight across all arms; the overlap red flag."""
    return max(float(hajek_weights(d, scores, w).max()) for w in range(1, d.T + 1))


_EXPORT_FIELDS = ("method", "w", "w_prime", "tau_hat", "se", "ci_lo", "ci_hi", "population", "n_used")


def _estimate_row(e: EffectEstimate) -> dict:
    return {
        "method": e.method,
        "w": e.w,
        "w_prime": e.w_prime,
        "tau_hat": e.tau_hat,
        "se": e.se,
        "ci_lo": e.ci_lower,
        "ci_hi": e.ci_upper,
        "population": e.population,
        "n_used": e.n_used,
    }


def estimates_to_json(estimates: list[EffectEstimate]) -> str:
    return json.dumps([_estimate_row(e) for e in estimates], indent=2, sort_keys=True)


def estimates_to_csv(estimates: list[EffectEstimate], comment: str | None = None) -> str:
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.DictWriter(buf, fieldnames=_EXPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for e in estimates:
        row = _estimate_row(e)
        for key in ("tau_hat", "se", "ci_lo", "ci_hi"):
            if row[key] is not None:
                row[key] = format(row[key], ".17g")
        writer.writerow(row)
    return buf.getvalue()
