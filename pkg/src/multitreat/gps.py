"""Generalized propensity score model: multinomial logistic regression.

Fits p(w | x) = exp(x' b_w) / sum_v exp(x' b_v) with the last level T as the
reference (b_T = 0) by Newton-Raphson with step-halving. The Newton core
accepts a leading batch dimension so that bootstrap procedures can refit
hundreds of resampled datasets in vectorized passes.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import ConvergenceError, DataError, NumericalError, SeparationError

# Per-replicate outcome codes for the batched Newton core.
_OK = 0
_MAXITER = 1
_SEPARATION = 2
_SINGULAR = 3
_STALLED = 4

_SEPARATION_BETA_BOUND = 1e4
_MAX_HALVINGS = 40


@dataclass(frozen=True)
class GpsModel:
    """Fitted multinomial-logit score model.

    ``coefficients`` has shape (T-1, K); the reference level T has an
    implicit all-zero row that is never stored.
    """

    coefficients: np.ndarray
    T: int
    covariate_names: list[str]
    converged: bool
    iterations: int
    log_likelihood: float
    intercept_added: bool = False

    def __post_init__(self):
        beta = np.asarray(self.coefficients, dtype=float)
        if beta.shape[0] != self.T - 1:
            raise DataError(f"coefficient rows {beta.shape[0]} != T-1 = {self.T - 1}")
        beta = beta.copy()
        beta.flags.writeable = False
        object.__setattr__(self, "coefficients", beta)

    @property
    def K(self) -> int:
        return self.coefficients.shape[1]


@dataclass(frozen=True)
class ScoreMatrix:
    """Per-unit score matrix, entry (i, w-1) = p(w | X_i).

    Every entry lies strictly inside (0, 1) and every row sums to 1 within
    1e-12; violations raise so that downstream 1/p arithmetic never sees a
    silent zero.
    """

    scores: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 2:
            raise DataError("scores must be an N x T matrix")
        if not np.all((s > 0.0) & (s < 1.0)):
            i, w = np.argwhere(~((s > 0.0) & (s < 1.0)))[0]
            raise NumericalError(
                f"score p(w={w + 1}|X_{i}) = {s[i, w]!r} outside (0, 1); "
                "overlap is effectively violated for this unit"
            )
        if np.max(np.abs(s.sum(axis=1) - 1.0)) > 1e-12:
            raise NumericalError("score rows must sum to 1 within 1e-12")
        s = s.copy()
        s.flags.writeable = False
        object.__setattr__(self, "scores", s)

    @property
    def n_units(self) -> int:
        return self.scores.shape[0]

    @property
    def T(self) -> int:
        return self.scores.shape[1]

    def column(self, w: int) -> np.ndarray:
        """Scores p(w | X_i) for one treatment level as a flat vector."""
        return self.scores[:, w - 1]


def design_matrix(d: Dataset, intercept_added: bool) -> np.ndarray:
    """Covariate matrix with a constant-1 column prepended when requested."""
    if not intercept_added:
        return d.covariates
    return np.hstack([np.ones((d.n_units, 1)), d.covariates])


def softmax_rows(linear: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max-subtraction for overflow safety."""
    m = linear.max(axis=-1, keepdims=True)
    z = np.exp(linear - m)
    return z / z.sum(axis=-1, keepdims=True)


def _free_probs(logits):
    """Probabilities for levels 1..T-1 given free logits; reference logit is 0.

    Returns (P, log_denom, M) where rows of [P, 1 - P.sum] are the full
    probability vectors and the log-likelihood per unit is
    chosen_logit - (M + log_denom).
    """
    M = np.maximum(logits.max(axis=-1), 0.0)
    Z = np.exp(logits - M[..., None])
    denom = Z.sum(axis=-1) + np.exp(-M)
    return Z / denom[..., None], np.log(denom), M


def _chosen_logit(logits, W, T):
    if T == 1:
        return np.zeros(W.shape)
    idx = np.minimum(W - 1, T - 2)[..., None]
    sel = np.take_along_axis(logits, idx, axis=-1)[..., 0]
    return np.where(W == T, 0.0, sel)


def _penalized_ll(X, W, beta, T, ridge):
    logits = X @ beta.transpose(0, 2, 1)
    _, log_denom, M = _free_probs(logits)
    ll = (_chosen_logit(logits, W, T) - M - log_denom).sum(axis=-1)
    if ridge > 0.0:
        ll = ll - 0.5 * ridge * (beta**2).sum(axis=(1, 2))
    return ll


def _evaluate(X, W, beta, T, ridge):
    """One fused pass: penalized log-likelihood, probabilities, gradient."""
    logits = X @ beta.transpose(0, 2, 1)
    P, log_denom, M = _free_probs(logits)
    ll = (_chosen_logit(logits, W, T) - M - log_denom).sum(axis=-1)
    G = -P.copy()
    for w in range(T - 1):
        G[..., w] += W == w + 1
    grad = G.transpose(0, 2, 1) @ X
    if ridge > 0.0:
        ll = ll - 0.5 * ridge * (beta**2).sum(axis=(1, 2))
        grad = grad - ridge * beta
    return ll, P, grad


def _neg_hessian(X, P, T, K, ridge):
    """Negated Hessian of the penalized log-likelihood (positive definite)."""
    B = X.shape[0]
    D = (T - 1) * K
    H = np.empty((B, D, D))
    for w in range(T - 1):
        for v in range(w, T - 1):
            if w == v:
                S = P[..., w] * (1.0 - P[..., w])
            else:
                S = -P[..., w] * P[..., v]
            blk = (X * S[..., None]).transpose(0, 2, 1) @ X
            H[:, w * K : (w + 1) * K, v * K : (v + 1) * K] = blk
            if v != w:
                H[:, v * K : (v + 1) * K, w * K : (w + 1) * K] = blk
    if ridge > 0.0:
        H[:, np.arange(D), np.arange(D)] += ridge
    return H


def _solve_steps(H, grad_flat):
    """Solve H s = g per batch element; returns (steps, singular_mask)."""
    B = H.shape[0]
    singular = np.zeros(B, dtype=bool)
    try:
        return np.linalg.solve(H, grad_flat[..., None])[..., 0], singular
    except np.linalg.LinAlgError:
        steps = np.zeros_like(grad_flat)
        for b in range(B):
            try:
                steps[b] = np.linalg.solve(H[b], grad_flat[b])
            except np.linalg.LinAlgError:
                singular[b] = True
        return steps, singular


def _newton_fit(X, W, T, beta0, *, max_iter, tol, ridge, ll_rel_tol=1e-12):
    """Batched Newton-Raphson ascent with step-halving.

    Args:
        X: (B, N, K) design matrices.
        W: (B, N) labels in 1..T.
        T: number of treatment levels.
        beta0: (B, T-1, K) starting values.

    Returns:
        (beta, status, iterations, log_lik, grad_max) with leading dim B.
        A replicate converges when the gradient max-norm drops below
        ``tol``. A relative log-likelihood change below ``ll_rel_tol``
        also counts, once the next gradient pass confirms the plateau is
        genuine rather than a slow traverse.
    """
    B, N, K = X.shape
    beta = np.array(beta0, dtype=float)
    status = np.full(B, _MAXITER, dtype=int)
    iters = np.zeros(B, dtype=int)
    gmax_out = np.full(B, np.inf)
    alive = np.ones(B, dtype=bool)
    stagnant = np.zeros(B, dtype=bool)
    # Cached evaluation at the current iterate, refreshed from accepted
    # line-search candidates so each iteration costs one likelihood pass.
    ll_cur, P_cur, grad_cur = _evaluate(X, W, beta, T, ridge)

    def retire(rows, code, gvals):
        status[rows] = code
        gmax_out[rows] = gvals
        alive[rows] = False

    while alive.any():
        idx = np.flatnonzero(alive)
        grad = grad_cur[idx]
        gmax = np.abs(grad).max(axis=(1, 2))

        conv = (gmax < tol) | (stagnant[idx] & (gmax < np.sqrt(tol)))
        if conv.any():
            retire(idx[conv], _OK, gmax[conv])
        exhausted = ~conv & (iters[idx] >= max_iter)
        if exhausted.any():
            retire(idx[exhausted], _MAXITER, gmax[exhausted])
        keep = ~conv & ~exhausted
        work = idx[keep]
        if work.size == 0:
            continue
        grad_w = grad[keep]
        full = work.size == B
        Xw = X if full else X[work]
        Ww = W if full else W[work]
        H = _neg_hessian(Xw, P_cur[work], T, K, ridge)
        steps, singular = _solve_steps(H, grad_w.reshape(work.size, -1))
        if singular.any():
            retire(work[singular], _SINGULAR, np.abs(grad_w[singular]).max(axis=(1, 2)))
            ok = ~singular
            work, steps, grad_w = work[ok], steps[ok], grad_w[ok]
            Xw, Ww = X[work], W[work]
            if work.size == 0:
                continue
        steps = steps.reshape(work.size, T - 1, K)

        # Step-halving: accept any step that does not lower the penalized
        # log-likelihood beyond float summation noise.
        bw = beta[work]
        ll_old = ll_cur[work]
        noise = 1e-11 * np.maximum(1.0, np.abs(ll_old))
        scale = np.ones(work.size)
        beta_try = bw + steps
        ll_try, P_try, grad_try = _evaluate(Xw, Ww, beta_try, T, ridge)
        for _ in range(_MAX_HALVINGS):
            worse = ll_try < ll_old - noise
            if not worse.any():
                break
            scale[worse] *= 0.5
            beta_try[worse] = bw[worse] + scale[worse, None, None] * steps[worse]
            ll_try[worse], P_try[worse], grad_try[worse] = _evaluate(
                Xw[worse], Ww[worse], beta_try[worse], T, ridge
            )
        accepted = ll_try >= ll_old - noise
        if (~accepted).any():
            retire(work[~accepted], _STALLED, np.abs(grad_w[~accepted]).max(axis=(1, 2)))
        upd = work[accepted]
        if upd.size == 0:
            continue
        beta[upd] = beta_try[accepted]
        rel = np.abs(ll_try[accepted] - ll_old[accepted]) / np.maximum(1.0, np.abs(ll_old[accepted]))
        stagnant[upd] = rel < ll_rel_tol
        ll_cur[upd] = ll_try[accepted]
        P_cur[upd] = P_try[accepted]
        grad_cur[upd] = grad_try[accepted]
        iters[upd] += 1

        if ridge == 0.0:
            diverged = np.abs(beta[upd]).max(axis=(1, 2)) > _SEPARATION_BETA_BOUND
            if diverged.any():
                retire(upd[diverged], _SEPARATION, np.full(int(diverged.sum()), np.inf))

    return beta, status, iters, ll_cur, gmax_out


def fit_multinomial_logit(
    d: Dataset,
    *,
    max_iter: int = 100,
    tol: float = 1e-8,
    ridge: float = 0.0,
) -> GpsModel:
    """Fit the generalized propensity score by multinomial logistic regression.

    An intercept column is prepended automatically when the dataset does not
    flag one. Raises :class:`SeparationError` when coefficients diverge with
    ridge=0 and :class:`ConvergenceError` (carrying the last iterate and
    gradient norm) when the iteration budget runs out.
    """
    T = d.T
    if T < 2:
        raise DataError("need at least two treatment levels to fit a score model")
    intercept_added = not d.has_intercept
    X = design_matrix(d, intercept_added)
    N, K = X.shape
    if N <= K * (T - 1):
        warnings.warn(
            f"N={N} is not larger than the {K * (T - 1)} free coefficients; "
            "the fit may be unstable",
            stacklevel=2,
        )
    beta0 = np.zeros((1, T - 1, K))
    beta, status, iters, ll, gmax = _newton_fit(
        X[None, :, :], d.treatment[None, :], T, beta0, max_iter=max_iter, tol=tol, ridge=ridge
    )
    code = int(status[0])
    if code == _SEPARATION:
        raise SeparationError(
            "coefficients diverged (complete or quasi-complete separation); "
            "refit with ridge > 0"
        )
    if code == _SINGULAR:
        raise NumericalError("singular Hessian; drop collinear covariates or add ridge")
    if code in (_MAXITER, _STALLED):
        raise ConvergenceError(
            f"no convergence after {int(iters[0])} iterations "
            f"(gradient max-norm {gmax[0]:.3e})",
            coefficients=beta[0],
            gradient_norm=float(gmax[0]),
            iterations=int(iters[0]),
        )
    names = list(d.covariate_names)
    if intercept_added:
        names = ["(intercept)", *names]
    return GpsModel(
        coefficients=beta[0],
        T=T,
        covariate_names=names,
        converged=True,
        iterations=int(iters[0]),
        log_likelihood=float(_penalized_ll(X[None], d.treatment[None], beta, T, 0.0)[0]),
        intercept_added=intercept_added,
    )


def predict_scores(m: GpsModel, d: Dataset) -> ScoreMatrix:
    """Evaluate fitted scores p(w | X_i) for all units and levels."""
    X = design_matrix(d, m.intercept_added)
    if X.shape[1] != m.K:
        raise DataError(f"dataset has {X.shape[1]} design columns, model expects {m.K}")
    linear = np.hstack([X @ m.coefficients.T, np.zeros((X.shape[0], 1))])
    return ScoreMatrix(softmax_rows(linear))


def true_scores(design, d: Dataset) -> ScoreMatrix:
    """Evaluate the known assignment scores of a simulation design.

    Useful for separating estimation error from design error: the returned
    matrix is the exact softmax of the design's coefficient matrix, not a
    fitted quantity.
    """
    beta = np.asarray(design.beta, dtype=float)
    if d.covariates.shape[1] != beta.shape[1]:
        raise DataError(
            f"dataset has {d.covariates.shape[1]} covariate columns, "
            f"design expects {beta.shape[1]}"
        )
    if d.T != beta.shape[0]:
        raise DataError(f"dataset has T={d.T} levels, design has {beta.shape[0]}")
    return ScoreMatrix(softmax_rows(d.covariates @ beta.T))


def model_to_json(m: GpsModel) -> str:
    """Serialize a fitted model to the documented JSON schema."""
    return json.dumps(
        {
            "T": m.T,
            "K": m.K,
            "covariate_names": list(m.covariate_names),
            "coefficients": [float(v) for v in m.coefficients.ravel()],
            "converged": m.converged,
            "log_likelihood": m.log_likelihood,
            "iterations": m.iterations,
            "intercept_added": m.intercept_added,
        },
        indent=2,
        sort_keys=True,
    )


def model_from_json(text: str) -> GpsModel:
    obj = json.loads(text)
    T, K = int(obj["T"]), int(obj["K"])
    coef = np.asarray(obj["coefficients"], dtype=float).reshape(T - 1, K)
    return GpsModel(
        coefficients=coef,
        T=T,
        covariate_names=list(obj["covariate_names"]),
        converged=bool(obj["converged"]),
        iterations=int(obj.get("iterations", 0)),
        log_likelihood=float(obj["log_likelihood"]),
        intercept_added=bool(obj.get("intercept_added", False)),
    )
