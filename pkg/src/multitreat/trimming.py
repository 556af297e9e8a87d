"""Overlap-improving sample trimming for multi-level treatments.

The retained region is C = {x : g(x) <= lambda} with g(x) the summed
inverse scores over all levels. The threshold is the largest candidate
satisfying the variance-bound self-consistency condition
lambda <= 2 * E[g | g <= lambda], with the expectation replaced by the
sample average over the retained units. Restricting candidates to observed
g values loses nothing: the retained set only changes there.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, UnitMask, apply_mask
from .errors import DataError
from .gps import GpsModel, ScoreMatrix, fit_multinomial_logit, predict_scores


@dataclass(frozen=True)
class TrimResult:
    """Outcome of one trimming pass.

    ``g`` holds the per-unit summed inverse scores on the input sample;
    ``trimmed_scores`` are re-estimated on the trimmed sample when
    ``refit`` is set, otherwise the input scores restricted to the
    retained rows.
    """

    lam: float
    g: np.ndarray
    mask: UnitMask
    dropped_per_arm: np.ndarray
    refit: bool
    trimmed_dataset: Dataset
    trimmed_scores: ScoreMatrix
    trimmed_model: GpsModel | None = None


def summed_inverse_scores(scores: ScoreMatrix) -> np.ndarray:
    """g_i = sum_w 1 / p(w | X_i); at least T^2 with equality at uniform scores."""
    return (1.0 / scores.scores).sum(axis=1)


def find_lambda(g) -> float:
    """Largest observed g value satisfying the sample trimming inequality.

    A candidate lambda = g_(k) is feasible iff g_(k) <= 2 * mean of the k
    smallest g values. k = 1 is always feasible (g <= 2g), so a threshold
    always exists; feasibility is not monotone in k, so all candidates are
    scanned.
    """
    g = np.asarray(g, dtype=float)
    if g.size == 0:
        raise DataError("empty g vector")
    if not np.all(np.isfinite(g)):
        raise DataError("non-finite summed inverse scores; a score underflowed")
    order = np.sort(g)
    k = np.arange(1, g.size + 1)
    feasible = order <= 2.0 * np.cumsum(order) / k
    if not feasible.any():  # impossible: k=1 is always feasible
        raise AssertionError("no feasible trimming threshold")
    return float(order[np.flatnonzero(feasible)[-1]])


def trim(d: Dataset, scores: ScoreMatrix, refit: bool = True, **fit_options) -> TrimResult:
    """Drop poor-overlap units and (by default) re-estimate the scores.

    The retained units are exactly those with g_i <= lambda. Estimates
    computed on the result describe the population represented by the
    trimmed sample, so downstream effect rows should carry the
    trimmed-sample population tag.
    """
    g = summed_inverse_scores(scores)
    lam = find_lambda(g)
    retained = g <= lam
    mask = UnitMask.from_dataset(d, retained)
    if np.any(mask.level_counts == 0):
        lost = [d.label_for(w + 1) for w in np.flatnonzero(mask.level_counts == 0)]
        raise DataError(f"trimming eliminates treatment level(s) {lost}")
    trimmed = apply_mask(d, mask)
    dropped = d.arm_counts() - mask.level_counts
    model = None
    if refit:
        model = fit_multinomial_logit(trimmed, **fit_options)
        trimmed_scores = predict_scores(model, trimmed)
    else:
        trimmed_scores = ScoreMatrix(scores.scores[retained])
    return TrimResult(
        lam=lam,
        g=g,
        mask=mask,
        dropped_per_arm=dropped,
        refit=refit,
        trimmed_dataset=trimmed,
        trimmed_scores=trimmed_scores,
        trimmed_model=model,
    )


def trim_result_to_json(result: TrimResult) -> str:
    quantiles = np.quantile(result.g, [0.0, 0.25, 0.5, 0.75, 1.0])
    return json.dumps(
        {
            "lambda": result.lam,
            "n_dropped": int((~result.mask.retained).sum()),
            "dropped_per_arm": [int(c) for c in result.dropped_per_arm],
            "g_summary": {
                "min": quantiles[0],
                "q25": quantiles[1],
                "median": quantiles[2],
                "q75": quantiles[3],
                "max": quantiles[4],
            },
            "refit": result.refit,
        },
        indent=2,
        sort_keys=True,
    )


def mask_to_csv(mask: UnitMask) -> str:
    lines = ["unit,retained"]
    lines += [f"{i},{int(r)}" for i, r in enumerate(mask.retained)]
    return "\n".join(lines) + "\n"
