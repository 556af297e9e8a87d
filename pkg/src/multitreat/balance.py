"""Covariate and score balance diagnostics: normalized differences, overlap histograms."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .errors import DataError
from .gps import ScoreMatrix


def _normalized_difference(values: np.ndarray, treatment: np.ndarray, w: int, T: int) -> float:
    """(arm mean - complement mean) / sqrt(T-level average within-arm variance).

    Returns 0.0 when the means agree exactly (covers constant columns) and
    NaN when the means differ but every arm is internally constant; callers
    flag the NaN instead of reporting an infinity.
    """
    in_arm = treatment == w
    if in_arm.sum() == values.size:
        raise DataError(f"level {w} is the whole sample; no complement to compare")
    mean_w = values[in_arm].mean()
    mean_rest = values[~in_arm].mean()
    if mean_w == mean_rest:
        return 0.0
    s2 = np.mean([values[treatment == v].var(ddof=1) for v in range(1, T + 1)])
    if s2 == 0.0:
        return float("nan")
    return float((mean_w - mean_rest) / math.sqrt(s2))


def normalized_diff_cov(d: Dataset, w: int, k: int) -> float:
    """Normalized difference of covariate column k for arm w vs its complement."""
    if np.any(d.arm_counts() < 2):
        raise DataError("every arm needs at least two units for within-arm variances")
    return _normalized_difference(d.covariates[:, k], d.treatment, w, d.T)


def normalized_diff_gps(d: Dataset, scores: ScoreMatrix, w: int) -> float:
    """Normalized difference of the score p(w|x) for arm w vs its complement."""
    if np.any(d.arm_counts() < 2):
        raise DataError("every arm needs at least two units for within-arm variances")
    return _normalized_difference(scores.column(w), d.treatment, w, d.T)


def overlap_histogram(
    d: Dataset, scores: ScoreMatrix, w: int, bins: int = 20
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Binned p(w|x) for units with W=w and W!=w on shared [0, 1] edges.

    Returns (edges, counts_in_arm, counts_elsewhere); the two count series
    sum to N_w and N - N_w.
    """
    if bins < 2:
        raise DataError("need at least two histogram bins")
    edges = np.linspace(0.0, 1.0, bins + 1)
    col = scores.column(w)
    in_arm = d.treatment == w
    counts_in, _ = np.histogram(col[in_arm], bins=edges)
    counts_out, _ = np.histogram(col[~in_arm], bins=edges)
    return edges, counts_in, counts_out


@dataclass(frozen=True)
class BalanceReport:
    """All normalized differences plus per-level overlap histograms."""

    covariate_names: list[str]
    nd_cov: np.ndarray  # (T, n_covariates); NaN marks undefined cells
    nd_gps: np.ndarray  # (T,)
    histogram_edges: np.ndarray
    histogram_in: np.ndarray  # (T, bins) counts for W = w
    histogram_out: np.ndarray  # (T, bins) counts for W != w

    @property
    def T(self) -> int:
        return self.nd_gps.size


def balance_report(d: Dataset, scores: ScoreMatrix, bins: int = 20) -> BalanceReport:
    """Evaluate every (level, covariate) normalized difference and histogram.

    The intercept column, when flagged, carries no balance information and
    is skipped.
    """
    T = d.T
    start = 1 if d.has_intercept else 0
    names = list(d.covariate_names[start:])
    nd_cov = np.array(
        [[normalized_diff_cov(d, w, k) for k in range(start, d.n_covariates)] for w in range(1, T + 1)]
    )
    nd_gps = np.array([normalized_diff_gps(d, scores, w) for w in range(1, T + 1)])
    edges = np.linspace(0.0, 1.0, bins + 1)
    hist_in = np.empty((T, bins), dtype=int)
    hist_out = np.empty((T, bins), dtype=int)
    for w in range(1, T + 1):
        _, hist_in[w - 1], hist_out[w - 1] = overlap_histogram(d, scores, w, bins)
    return BalanceReport(
        covariate_names=names,
        nd_cov=nd_cov,
        nd_gps=nd_gps,
        histogram_edges=edges,
        histogram_in=hist_in,
        histogram_out=hist_out,
    )


def _nd_cell(value: float) -> dict:
    defined = not math.isnan(value)
    return {"value": value if defined else None, "defined": defined}


def report_to_json(report: BalanceReport) -> str:
    obj = {
        "normalized_differences": {
            "covariates": [
                {
                    "level": w,
                    "values": {
                        name: _nd_cell(report.nd_cov[w - 1, k])
                        for k, name in enumerate(report.covariate_names)
                    },
                }
                for w in range(1, report.T + 1)
            ],
            "gps": [
                {"level": w, **_nd_cell(report.nd_gps[w - 1])} for w in range(1, report.T + 1)
            ],
        },
        "histograms": [
            {
                "level": w,
                "edges": list(report.histogram_edges),
                "counts_in_arm": [int(c) for c in report.histogram_in[w - 1]],
                "counts_elsewhere": [int(c) for c in report.histogram_out[w - 1]],
            }
            for w in range(1, report.T + 1)
        ],
    }
    return json.dumps(obj, indent=2, sort_keys=True)


def report_to_csv(report: BalanceReport, comment: str | None = None) -> str:
    """Flat export: one row per (metric, level, covariate) cell."""
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "level", "covariate", "value", "defined"])
    for w in range(1, report.T + 1):
        for k, name in enumerate(report.covariate_names):
            cell = _nd_cell(report.nd_cov[w - 1, k])
            writer.writerow(
                [
                    "nd_cov",
                    w,
                    name,
                    "" if cell["value"] is None else format(cell["value"], ".17g"),
                    int(cell["defined"]),
                ]
            )
    for w in range(1, report.T + 1):
        cell = _nd_cell(report.nd_gps[w - 1])
        writer.writerow(
            [
                "nd_gps",
                w,
                "",
                "" if cell["value"] is None else format(cell["value"], ".17g"),
                int(cell["defined"]),
            ]
        )
    return buf.getvalue()
