"""Standard errors and confidence intervals.

Two recipes: percentile bootstrap with the score model re-fit inside every
replicate (DIF, GPSS, W, and optionally GPSM as a sensitivity check), and
a matched-sample variance for the matching estimators (COV, PSSM, GPSM,
PPSM) that combines donor-reuse counts with a nearest-same-arm-pair
variance proxy, treating the fitted scores as fixed.

The bootstrap is vectorized: resampled design matrices are stacked along a
batch axis and refit by the batched Newton core, chunked to bound memory.
Replicate b draws its resample indices from a stream seeded by
(rng_seed, b), so results do not depend on chunking or evaluation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from statistics import NormalDist

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, DataError, MultitreatError, NumericalError
from .estimators import (
    contrast_pairs,
    effects_from_imputation,
    estimate_dif,
    estimate_gpss,
    estimate_weighting,
    impute_matrix,
)
from .gps import GpsModel, _OK, _free_probs, _newton_fit, design_matrix, fit_multinomial_logit, predict_scores
from .matching import _nearest_rows, match_scalar

_BOOTSTRAP_TAGS = ("DIF", "GPSS", "W", "GPSM")
_NEAR_ZERO_SCORE = 1e-12
_MAX_DISCARD_FRACTION = 0.05


@dataclass(frozen=True)
class CiSpec:
    """How to build intervals: method, level, bootstrap size, seed."""

    method: str = "bootstrap-percentile"
    level: float = 0.95
    bootstrap_reps: int = 1000
    rng_seed: int = 0

    def validate(self):
        if self.method not in ("bootstrap-percentile", "matching-variance"):
            raise ConfigError(f"unknown CI method {self.method!r}")
        if not 0.0 < self.level < 1.0:
            raise ConfigError("confidence level must lie in (0, 1)")
        if self.bootstrap_reps < 100:
            raise ConfigError("need at least 100 bootstrap replicates")
        if self.bootstrap_reps * (1.0 - self.level) / 2.0 < 1.0:
            raise ConfigError(
                f"{self.bootstrap_reps} replicates cannot resolve the "
                f"{(1 + self.level) / 2:.4f} percentile; increase bootstrap_reps"
            )


@dataclass(frozen=True)
class CiResult:
    """Point estimate with its interval and bootstrap accounting."""

    tau_hat: float
    se: float
    ci_lower: float
    ci_upper: float
    n_used: int
    n_discarded: int = 0


def z_multiplier(level: float) -> float:
    return NormalDist().inv_cdf((1.0 + level) / 2.0)


def _resample_indices(seed: int, b: int, n: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence((seed, b)))
    return rng.integers(0, n, n)


def _arm_stats(W, T, weights=None):
    """Per-replicate, per-arm sums of ``weights`` (counts when None)."""
    B, N = W.shape
    flat = (np.arange(B)[:, None] * (T + 1) + W).ravel()
    wts = None if weights is None else weights.ravel()
    return np.bincount(flat, weights=wts, minlength=B * (T + 1)).reshape(B, T + 1)[:, 1:]


def _batched_scores(X, beta, T):
    """Full (B, N, T) probability tensor from free coefficients."""
    P, log_denom, M = _free_probs(X @ beta.transpose(0, 2, 1))
    ref = np.exp(-(M + log_denom))
    return np.concatenate([P, ref[:, :, None]], axis=2)


def _gpss_means(P_col, W, Y, arm, subclasses, n_units):
    """Vectorized subclassification means for one level across replicates.

    Returns (means, failed): NaN means with ``failed`` set where a
    populated subclass holds no arm units.
    """
    B, N = P_col.shape
    J = subclasses
    qs = np.arange(1, J) / J
    edges = np.quantile(P_col, qs, axis=1).T  # (B, J-1)
    strata = (P_col[:, :, None] > edges[:, None, :]).sum(axis=2)
    flat = (np.arange(B)[:, None] * J + strata).ravel()
    n_total = np.bincount(flat, minlength=B * J).reshape(B, J)
    in_arm = (W == arm).astype(float)
    n_arm = np.bincount(flat, weights=in_arm.ravel(), minlength=B * J).reshape(B, J)
    sums = np.bincount(flat, weights=(in_arm * Y).ravel(), minlength=B * J).reshape(B, J)
    failed = ((n_total > 0) & (n_arm == 0)).any(axis=1)
    mu = np.divide(sums, n_arm, out=np.zeros_like(sums), where=n_arm > 0)
    means = (n_total / n_units * mu).sum(axis=1)
    means[failed] = np.nan
    return means, failed


def _gpsm_taus(P, W, Y, T, pairs):
    """Scalar-score matching estimates for one replicate."""
    cols = np.empty(T)
    for w in range(1, T + 1):
        col = P[:, w - 1]
        assign = match_scalar(col, col, W, w)
        own = np.flatnonzero(W == w)
        idx = assign.indices.copy()
        idx[own] = own
        cols[w - 1] = Y[idx].mean()
    return {(w, v): cols[v - 1] - cols[w - 1] for w, v in pairs}


def _full_sample_points(d, scores, tags, clip, subclasses):
    points = {}
    for tag in tags:
        if tag == "DIF":
            ests = estimate_dif(d)
        elif tag == "W":
            ests = estimate_weighting(d, scores, clip=clip)
        elif tag == "GPSS":
            ests = estimate_gpss(d, scores, subclasses=subclasses)
        elif tag == "GPSM":
            imputed = impute_matrix(d, "gps-scalar", scores=scores)
            ests = effects_from_imputation(d, imputed, "GPSM")
        points[tag] = {(e.w, e.w_prime): e.tau_hat for e in ests}
    return points


def bootstrap_ci(
    d: Dataset,
    estimators,
    spec: CiSpec,
    *,
    clip: float | None = None,
    subclasses: int = 5,
    ridge: float = 0.0,
    model: GpsModel | None = None,
    refit_tol: float = 1e-4,
    chunk_elements: int = 1_400_000,
):
    """Percentile-bootstrap intervals with full-pipeline resampling.

    Units are resampled with replacement; the score model is re-fit inside
    every replicate (warm-started at the full-sample fit) and GPSS subclass
    boundaries are re-estimated per replicate. Replicates that lose an arm,
    fail to fit, or produce an empty subclass cell are discarded and
    counted per estimator; more than 5% discards is an error for that
    estimator.

    Accepts one estimator tag (returns {pair: CiResult}, raising on
    failure) or a list of tags (returns {tag: {pair: CiResult} | error}
    so one estimator's failure does not destroy the others' results).
    GPSM is accepted as an explicit sensitivity alternative to its default
    matched-sample variance.
    """
    single = isinstance(estimators, str)
    tags = [estimators] if single else list(estimators)
    bad = [t for t in tags if t not in _BOOTSTRAP_TAGS]
    if bad:
        raise ConfigError(f"bootstrap supports {list(_BOOTSTRAP_TAGS)}, not {bad}")
    spec.validate()

    N, T = d.n_units, d.T
    B = spec.bootstrap_reps
    pairs = contrast_pairs(T)
    n_pairs = len(pairs)
    need_fit = any(t != "DIF" for t in tags)

    if need_fit and model is None:
        model = fit_multinomial_logit(d, ridge=ridge)
    scores = predict_scores(model, d) if need_fit else None
    points = _full_sample_points(d, scores, tags, clip, subclasses)

    X = design_matrix(d, model.intercept_added) if need_fit else None
    beta_full = model.coefficients if need_fit else None
    K = X.shape[1] if need_fit else 0

    taus = {tag: np.full((B, n_pairs), np.nan) for tag in tags}
    chunk_b = max(1, int(chunk_elements // max(1, N * max(K, 1))))

    for start in range(0, B, chunk_b):
        rows = range(start, min(start + chunk_b, B))
        Bc = len(rows)
        idx = np.empty((Bc, N), dtype=int)
        for j, b in enumerate(rows):
            idx[j] = _resample_indices(spec.rng_seed, b, N)
        Wc = d.treatment[idx]
        Yc = d.outcome[idx]
        counts = _arm_stats(Wc, T)
        valid = (counts > 0).all(axis=1)

        P = None
        fitted = valid.copy()
        if need_fit:
            P = np.full((Bc, N, T), np.nan)
            fitted = np.zeros(Bc, dtype=bool)
            vi = np.flatnonzero(valid)
            if vi.size:
                Xc = X[idx[vi]]
                beta0 = np.broadcast_to(beta_full, (vi.size, T - 1, K))
                beta, status, _, _, _ = _newton_fit(
                    Xc, Wc[vi], T, beta0, max_iter=100, tol=refit_tol, ridge=ridge
                )
                ok = status == _OK
                fitted[vi[ok]] = True
                if ok.any():
                    P[vi[ok]] = _batched_scores(Xc[ok], beta[ok], T)

        for tag in tags:
            if tag == "DIF":
                means = np.full((Bc, T), np.nan)
                sums = _arm_stats(Wc, T, weights=Yc)
                np.divide(sums, counts, out=means, where=counts > 0)
                good = valid
            elif tag == "W":
                p_own = np.take_along_axis(P, (Wc - 1)[:, :, None], axis=2)[:, :, 0]
                if clip is not None:
                    p_own = np.maximum(p_own, clip)
                with np.errstate(divide="ignore", invalid="ignore"):
                    inv = 1.0 / p_own
                    num = _arm_stats(Wc, T, weights=np.nan_to_num(Yc * inv))
                    den = _arm_stats(Wc, T, weights=np.nan_to_num(inv))
                    means = num / den
                # NaN rows are already excluded via `fitted`; the comparison
                # returns False on NaN, which is what we want there.
                good = fitted & ~(p_own < _NEAR_ZERO_SCORE).any(axis=1)
            elif tag == "GPSS":
                means = np.empty((Bc, T))
                failed_any = np.zeros(Bc, dtype=bool)
                fi = np.flatnonzero(fitted)
                means[:] = np.nan
                if fi.size:
                    for w in range(1, T + 1):
                        m_w, f_w = _gpss_means(
                            P[fi, :, w - 1], Wc[fi], Yc[fi], w, subclasses, N
                        )
                        means[fi, w - 1] = m_w
                        failed_any[fi] |= f_w
                good = fitted & ~failed_any
            elif tag == "GPSM":
                means = None
                good = fitted
                for j in np.flatnonzero(fitted):
                    row = _gpsm_taus(P[j], Wc[j], Yc[j], T, pairs)
                    taus[tag][start + j] = [row[p] for p in pairs]
                continue
            for k, (w, v) in enumerate(pairs):
                col = means[:, v - 1] - means[:, w - 1]
                col[~good] = np.nan
                taus[tag][start : start + Bc, k] = col

    alpha = 1.0 - spec.level
    out = {}
    for tag in tags:
        mat = taus[tag]
        ok_rows = ~np.isnan(mat).any(axis=1)
        n_disc = int(B - ok_rows.sum())
        if n_disc > _MAX_DISCARD_FRACTION * B:
            err = NumericalError(
                f"bootstrap discarded {n_disc} of {B} replicates (> "
                f"{_MAX_DISCARD_FRACTION:.0%}) for {tag}; the estimator is "
                "unstable on this sample"
            )
            if single:
                raise err
            out[tag] = err
            continue
        kept = mat[ok_rows]
        lo = np.percentile(kept, 100 * alpha / 2, axis=0)
        hi = np.percentile(kept, 100 * (1 - alpha / 2), axis=0)
        se = kept.std(axis=0, ddof=1)
        out[tag] = {
            pair: CiResult(
                tau_hat=points[tag][pair],
                se=float(se[k]),
                ci_lower=float(lo[k]),
                ci_upper=float(hi[k]),
                n_used=int(ok_rows.sum()),
                n_discarded=n_disc,
            )
            for k, pair in enumerate(pairs)
        }
    return out[tags[0]] if single else out


def _nearest_excluding_self(vals: np.ndarray) -> np.ndarray:
    """Position of each row's nearest other row (ties to the smallest index)."""
    v = vals if vals.ndim == 2 else vals[:, None]
    nn, _ = _nearest_rows(v, v, exclude=np.arange(v.shape[0]))
    return nn


def matching_variance(d: Dataset, imputed, *, level: float = 0.95, pairs=None):
    """Matched-sample variance for 1-NN-with-replacement mean contrasts.

    For tau(w, w') the estimator combines the spread of imputed unit-level
    contrasts with a donor-reuse noise correction K(K-1) sigma^2 per donor,
    where K counts how often a unit serves as a match for its own arm
    (including itself) and sigma^2 is half the squared outcome gap to the
    nearest same-arm neighbor on the matching variable. Scores are treated
    as fixed. Returns {pair: CiResult}.
    """
    N, T = d.n_units, d.T
    Y = d.outcome
    z = z_multiplier(level)
    pairs = list(pairs) if pairs is not None else contrast_pairs(T)

    sigma2 = np.empty(N)
    reuse = np.empty((N, T))
    for w in range(1, T + 1):
        pool = d.arm_indices(w)
        if pool.size < 2:
            raise NumericalError(
                f"arm {w} has a single unit; within-arm outcome variance is undefined"
            )
        vals = np.asarray(imputed.matching_values[w], dtype=float)
        nn = _nearest_excluding_self(vals[pool])
        sigma2[pool] = (Y[pool] - Y[pool[nn]]) ** 2 / 2.0
        reuse[:, w - 1] = np.bincount(imputed.match_index[:, w - 1], minlength=N)

    out = {}
    for w, v in pairs:
        dvec = imputed.values[:, v - 1] - imputed.values[:, w - 1]
        tau = dvec.mean()
        noise = 0.0
        for arm in (w, v):
            pool = d.arm_indices(arm)
            k_arm = reuse[pool, arm - 1]
            noise += (k_arm * (k_arm - 1.0) * sigma2[pool]).sum()
        var = (((dvec - tau) ** 2).sum() + noise) / N**2
        se = float(np.sqrt(var))
        out[(w, v)] = CiResult(
            tau_hat=float(tau),
            se=se,
            ci_lower=float(tau - z * se),
            ci_upper=float(tau + z * se),
            n_used=N,
        )
    return out
