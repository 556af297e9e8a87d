"""Nearest-neighbor search primitives shared by the matching estimators.

Three metrics: absolute difference on a scalar (sorted-array search),
Euclidean distance on score vectors, and the Mahalanobis metric on
covariates (whitened to a Euclidean problem via Cholesky). All searches
are with replacement, return a single nearest neighbor, and break exact
distance ties by the smallest donor index; correctness is defined by
equality with an O(N^2) brute-force scan.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import Dataset
from .errors import DataError, NumericalError

_SCAN_CHUNK = 512


@dataclass(frozen=True)
class MatchSpec:
    """Which matching variable and metric to impute one treatment level with."""

    target_level: int
    metric: str  # "scalar" | "vector" | "mahalanobis"
    V: np.ndarray | None = None


@dataclass(frozen=True)
class MatchAssignment:
    """Matched donor per query for one target level.

    ``indices[i]`` is a unit index with the target treatment level;
    ``distances[i]`` is the metric value of the match.
    """

    level: int
    indices: np.ndarray
    distances: np.ndarray


def _donor_pool(treatment, level):
    pool = np.flatnonzero(np.asarray(treatment) == level)
    if pool.size == 0:
        raise DataError(f"no donor units with treatment level {level}")
    return pool


def mahalanobis_matrix(d: Dataset) -> np.ndarray:
    """Sample covariance of the covariates with divisor N, intercept excluded.

    Raises on a singular matrix instead of falling back to a pseudo-inverse;
    duplicated or collinear covariates should be pruned by the caller.
    """
    if d.n_units < 2:
        raise DataError("need at least two units to form a covariance matrix")
    X = effective_covariates(d)
    centered = X - X.mean(axis=0)
    V = centered.T @ centered / d.n_units
    try:
        np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "sample covariance matrix is singular; drop duplicated or "
            "collinear covariates before covariate matching"
        ) from None
    return V


def effective_covariates(d: Dataset) -> np.ndarray:
    """Covariate columns that carry metric information (intercept dropped)."""
    return d.covariates[:, 1:] if d.has_intercept else d.covariates


def match_scalar(query_values, donor_values, treatment, level) -> MatchAssignment:
    """Nearest donor in the given arm by absolute difference on a scalar.

    Ties (a query exactly half-way between two donor values, or duplicate
    donor values) resolve to the smallest donor index.
    """
    q = np.asarray(query_values, dtype=float)
    v = np.asarray(donor_values, dtype=float)
    pool = _donor_pool(treatment, level)
    vals = v[pool]
    order = np.argsort(vals, kind="stable")
    sv = vals[order]
    sidx = pool[order]
    n = sv.size
    # First sorted position of each run of equal values; with a stable sort
    # over an ascending pool that position holds the smallest donor index.
    starts = np.r_[True, sv[1:] != sv[:-1]]
    first_pos = np.maximum.accumulate(np.where(starts, np.arange(n), 0))

    pos = np.searchsorted(sv, q)
    lf = first_pos[np.clip(pos - 1, 0, n - 1)]
    rf = first_pos[np.clip(pos, 0, n - 1)]
    dl = np.where(pos > 0, np.abs(q - sv[lf]), np.inf)
    dr = np.where(pos < n, np.abs(sv[rf] - q), np.inf)
    il, ir = sidx[lf], sidx[rf]
    take_left = (dl < dr) | ((dl == dr) & (il <= ir))
    return MatchAssignment(
        level=level,
        indices=np.where(take_left, il, ir),
        distances=np.where(take_left, dl, dr),
    )


def _nearest_rows(queries, donors, exclude=None):
    """Index into ``donors`` of the squared-Euclidean nearest row per query.

    Ties resolve to the earliest donor row, defined by the direct
    sum-of-squared-differences scan. The fast path uses the inner-product
    expansion, whose rounding differs from the direct scan, so any donors
    within the expansion's error band of the minimum are re-checked with
    the exact arithmetic; results are therefore bit-identical to the
    direct scan. ``exclude[i]`` names a donor row query i may not match
    (used for nearest-other-neighbor searches).
    """
    nq = queries.shape[0]
    best = np.empty(nq, dtype=int)
    dist2 = np.empty(nq)
    qn = np.einsum("ij,ij->i", queries, queries)
    dn = np.einsum("ij,ij->i", donors, donors)
    dmax = dn.max() if dn.size else 0.0
    for start in range(0, nq, _SCAN_CHUNK):
        stop = min(start + _SCAN_CHUNK, nq)
        chunk = queries[start:stop]
        approx = qn[start:stop, None] + dn[None, :] - 2.0 * (chunk @ donors.T)
        if exclude is not None:
            rows = np.arange(stop - start)
            approx[rows, exclude[start:stop]] = np.inf
        m = approx.min(axis=1)
        band = m + 1e-11 * (qn[start:stop] + dmax + 1.0)
        inband = approx <= band[:, None]
        am = approx.argmin(axis=1)
        for i in np.flatnonzero(inband.sum(axis=1) > 1):
            cand = np.flatnonzero(inband[i])
            if exclude is not None:
                cand = cand[cand != exclude[start + i]]
            diff = donors[cand] - chunk[i]
            am[i] = cand[np.einsum("ij,ij->i", diff, diff).argmin()]
        best[start:stop] = am
        diff = donors[am] - chunk
        dist2[start:stop] = np.einsum("ij,ij->i", diff, diff)
    return best, dist2


def match_vector(query_rows, donor_rows, treatment, level) -> MatchAssignment:
    """Nearest donor in the given arm by Euclidean distance on score vectors."""
    Q = np.atleast_2d(np.asarray(query_rows, dtype=float))
    D = np.atleast_2d(np.asarray(donor_rows, dtype=float))
    if Q.shape[1] != D.shape[1]:
        raise DataError(f"query rows have {Q.shape[1]} columns, donors {D.shape[1]}")
    pool = _donor_pool(treatment, level)
    am, dist2 = _nearest_rows(Q, D[pool])
    return MatchAssignment(level=level, indices=pool[am], distances=np.sqrt(dist2))


def match_covariates(d: Dataset, V: np.ndarray, level: int) -> MatchAssignment:
    """Nearest donor in the given arm under the Mahalanobis metric.

    Implemented by whitening: with V = L L' the metric equals the Euclidean
    distance between L^{-1} x rows.
    """
    Z = whiten(effective_covariates(d), V)
    pool = _donor_pool(d.treatment, level)
    am, dist2 = _nearest_rows(Z, Z[pool])
    return MatchAssignment(level=level, indices=pool[am], distances=np.sqrt(dist2))


def whiten(X: np.ndarray, V: np.ndarray) -> np.ndarray:
    """Rows x mapped to L^{-1} x for the Cholesky factor L of V."""
    if V.shape[0] != V.shape[1] or V.shape[0] != X.shape[1]:
        raise DataError(f"metric matrix {V.shape} does not match covariates {X.shape}")
    try:
        L = np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise NumericalError(
            "metric matrix is not positive definite; drop duplicated or "
            "collinear covariates"
        ) from None
    return np.linalg.solve(L, X.T).T
