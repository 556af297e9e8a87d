"""Data-generating processes and the Monte Carlo evaluation harness.

Two built-in designs share one covariate law: three correlated normals, a
uniform on [-3, 3], a chi-square(1) (generated as a squared standard
normal), and a fair Bernoulli, behind a constant-1 intercept column.
Assignment is multinomial on a softmax of the design's coefficient matrix;
outcomes are linear in the covariates with unit normal noise. Because the
covariate mean vector annihilates every coefficient difference, all true
pairwise effects are zero in both designs, which makes reported bias
directly interpretable.

Arm sizes are filled by rejection into fixed per-arm quotas by default
(draws for already-full arms are discarded, preserving the covariate law
within each arm); drawing a fixed total with random arm splits is
available behind a flag.
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .dataset import Dataset
from .errors import ConfigError, DataError, MultitreatError, NumericalError
from .estimators import (
    ALL_METHODS,
    EffectEstimate,
    contrast_pairs,
    effects_from_imputation,
    estimate_dif,
    impute_matrix,
    ppsm_components,
)
from .gps import fit_multinomial_logit, predict_scores, softmax_rows
from .inference import CiSpec, bootstrap_ci, matching_variance

_COV3 = np.array([[2.0, 1.0, -1.0], [1.0, 1.0, -0.5], [-1.0, -0.5, 1.0]])
_CHOL3 = np.linalg.cholesky(_COV3)
# E[(1, X1, X2, X3, X4, X5, X6)]: zero-mean normals and uniform, E[chi2_1] = 1,
# E[Bernoulli(0.5)] = 0.5.
_MEAN_X = np.array([1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.5])

_COVARIATE_NAMES = ["intercept", "x1", "x2", "x3", "x4", "x5", "x6"]

BOOTSTRAP_TAGS = ("DIF", "GPSS", "W")
MATCHING_TAGS = ("COV", "PSSM", "GPSM", "PPSM")


@dataclass(frozen=True)
class TrueEffects:
    """Closed-form pairwise effects tau(w, w') = E[X]' (gamma_w' - gamma_w)."""

    values: np.ndarray  # (T, T) antisymmetric

    @property
    def T(self) -> int:
        return self.values.shape[0]

    def value(self, w: int, w_prime: int) -> float:
        return float(self.values[w - 1, w_prime - 1])

    def as_pairs(self) -> dict[tuple[int, int], float]:
        return {(w, v): self.value(w, v) for w, v in contrast_pairs(self.T)}


@dataclass(frozen=True)
class SimulationDesign:
    """A multinomial-assignment, linear-outcome design.

    ``beta`` and ``gamma`` are (T, K) with the level-1 coefficient row all
    zero in the built-in designs; ``arm_sizes`` are per-level targets for
    quota generation (and their sum is the total in random-split mode).
    """

    name: str
    beta: np.ndarray
    gamma: np.ndarray
    arm_sizes: np.ndarray
    noise_sd: float = 1.0

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float)
        gamma = np.asarray(self.gamma, dtype=float)
        sizes = np.asarray(self.arm_sizes, dtype=int)
        if beta.shape != gamma.shape or beta.shape[0] != sizes.size:
            raise ConfigError("design dimensions are inconsistent")
        if beta.shape[1] != _MEAN_X.size:
            raise ConfigError(f"designs use {_MEAN_X.size} design columns, got {beta.shape[1]}")
        if np.any(sizes < 1):
            raise ConfigError("arm sizes must be positive")
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "arm_sizes", sizes)

    @property
    def T(self) -> int:
        return self.beta.shape[0]

    @property
    def K(self) -> int:
        return self.beta.shape[1]

    @property
    def mean_covariates(self) -> np.ndarray:
        return _MEAN_X.copy()

    def true_effects(self) -> TrueEffects:
        arm_means = self.gamma @ _MEAN_X
        return TrueEffects(values=arm_means[None, :] - arm_means[:, None])


def design1() -> SimulationDesign:
    """Three treatment levels, 500 units per arm."""
    beta = np.array(
        [
            [0, 0, 0, 0, 0, 0, 0],
            0.7 * np.array([0, 1, 1, 1, -1, 1, 1]),
            0.4 * np.array([0, 1, 1, 1, 1, 1, 1]),
        ],
        dtype=float,
    )
    gamma = np.array(
        [
            [-1.5, 1, 1, 1, 1, 1, 1],
            [-3, 2, 3, 1, 2, 2, 2],
            [1.5, 3, 1, 2, -1, -1, -1],
        ],
        dtype=float,
    )
    return SimulationDesign("design1", beta, gamma, np.full(3, 500))


def design2() -> SimulationDesign:
    """Six treatment levels with strongly separated covariate distributions."""
    beta = np.array(
        [
            [0, 0, 0, 0, 0, 0, 0],
            0.4 * np.array([0, 1, 1, 2, 1, 1, 1]),
            0.6 * np.array([0, 1, 1, 1, 1, 1, -5]),
            0.8 * np.array([0, 1, 1, 1, 1, 1, 5]),
            1.0 * np.array([0, 1, 1, 1, -2, 1, 1]),
            1.2 * np.array([0, 1, 1, 1, -2, -1, 1]),
        ],
        dtype=float,
    )
    gamma = np.array(
        [
            [-1.5, 1, 1, 1, 1, 1, 1],
            [-3, 2, 3, 1, 2, 2, 2],
            [3, 3, 1, 2, -1, -1, -4],
            [2.5, 4, 1, 2, -1, -1, -3],
            [2, 5, 1, 2, -1, -1, -2],
            [1.5, 6, 1, 2, -1, -1, -1],
        ],
        dtype=float,
    )
    return SimulationDesign("design2", beta, gamma, np.full(6, 1000))


def design_by_name(name: str) -> SimulationDesign:
    factories = {"design1": design1, "design2": design2}
    if name not in factories:
        raise ConfigError(f"unknown design {name!r}; choose from {sorted(factories)}")
    return factories[name]()


def draw_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    """n draws of the shared covariate vector (1, X1, ..., X6)."""
    X = np.empty((n, 7))
    X[:, 0] = 1.0
    X[:, 1:4] = rng.standard_normal((n, 3)) @ _CHOL3.T
    X[:, 4] = rng.uniform(-3.0, 3.0, n)
    X[:, 5] = rng.standard_normal(n) ** 2
    X[:, 6] = rng.random(n) < 0.5
    return X


def _draw_assignments(rng, X, beta):
    probs = softmax_rows(X @ beta.T)
    u = rng.random(X.shape[0])
    labels = (u[:, None] > np.cumsum(probs, axis=1)).sum(axis=1) + 1
    return np.minimum(labels, beta.shape[0])


def generate(
    design: SimulationDesign,
    seed,
    fixed_arm_sizes: bool = True,
    max_draw_factor: int = 100,
) -> Dataset:
    """Draw one dataset from a design.

    With ``fixed_arm_sizes`` (the default), (X, W) pairs are drawn until
    every arm holds exactly its target count, discarding draws for full
    arms; generation order is then shuffled. Without it, the grand total is
    drawn in one pass and arm sizes fall where they may.
    """
    rng = np.random.default_rng(seed)
    total = int(design.arm_sizes.sum())
    if fixed_arm_sizes:
        need = design.arm_sizes.copy()
        kept_X: list[np.ndarray] = [np.empty((0, design.K))] * design.T
        drawn = 0
        cap = max_draw_factor * total
        while need.sum() > 0:
            batch = int(min(max(2048, 4 * need.sum()), cap - drawn))
            if batch <= 0:
                raise NumericalError(
                    f"arm quotas not met after {cap} draws; the design makes "
                    "some arm effectively unreachable"
                )
            X = draw_covariates(rng, batch)
            W = _draw_assignments(rng, X, design.beta)
            drawn += batch
            for w in range(1, design.T + 1):
                if need[w - 1] == 0:
                    continue
                take = np.flatnonzero(W == w)[: need[w - 1]]
                kept_X[w - 1] = np.vstack([kept_X[w - 1], X[take]])
                need[w - 1] -= take.size
        X = np.vstack(kept_X)
        W = np.repeat(np.arange(1, design.T + 1), design.arm_sizes)
    else:
        X = draw_covariates(rng, total)
        W = _draw_assignments(rng, X, design.beta)
    Y = np.einsum("ij,ij->i", X, design.gamma[W - 1]) + design.noise_sd * rng.standard_normal(
        X.shape[0]
    )
    perm = rng.permutation(X.shape[0])
    return Dataset(
        covariates=X[perm],
        treatment=W[perm],
        outcome=Y[perm],
        covariate_names=list(_COVARIATE_NAMES),
        treatment_labels=[str(w) for w in range(1, design.T + 1)],
        has_intercept=True,
    )


def generate_design1(seed, fixed_arm_sizes: bool = True) -> Dataset:
    return generate(design1(), seed, fixed_arm_sizes=fixed_arm_sizes)


def generate_design2(seed, fixed_arm_sizes: bool = True) -> Dataset:
    return generate(design2(), seed, fixed_arm_sizes=fixed_arm_sizes)


@dataclass(frozen=True)
class CellSummary:
    """Scores for one (estimator, contrast) cell."""

    bias: float
    rmse: float
    coverage: float
    n_used: int
    n_failed: int


@dataclass(frozen=True)
class MonteCarloSummary:
    design_name: str
    replications: int
    seed: int
    estimators: tuple[str, ...]
    contrasts: tuple[tuple[int, int], ...]
    cells: dict[tuple[str, int, int], CellSummary]
    unreliable: tuple[str, ...]

    def cell(self, method: str, w: int, w_prime: int) -> CellSummary:
        return self.cells[(method, w, w_prime)]


# One replicate's output: method -> {pair -> (tau, ci_lo, ci_hi)}, or an
# error string under the method key in `failures`.
ReplicateResult = dict


def score_summary(
    replicates: list[ReplicateResult],
    truth: TrueEffects,
    *,
    design_name: str = "custom",
    seed: int = 0,
    estimators: tuple[str, ...] | None = None,
) -> MonteCarloSummary:
    """Aggregate per-replicate estimates into bias / RMSE / CI coverage.

    A replicate missing a method (recorded failure) is excluded from that
    method's cells and counted; methods failing in more than 5% of
    replicates are flagged unreliable.
    """
    R = len(replicates)
    if R < 1:
        raise DataError("need at least one replicate to score")
    if estimators is None:
        seen = []
        for rep in replicates:
            for tag in rep["estimates"]:
                if tag not in seen:
                    seen.append(tag)
        estimators = tuple(seen)
    contrasts = tuple(contrast_pairs(truth.T))
    cells = {}
    unreliable = []
    for tag in estimators:
        ok = [rep["estimates"][tag] for rep in replicates if tag in rep["estimates"]]
        n_failed = R - len(ok)
        if n_failed > 0.05 * R:
            unreliable.append(tag)
        for pair in contrasts:
            tau_true = truth.value(*pair)
            taus = np.array([est[pair][0] for est in ok])
            los = np.array([est[pair][1] for est in ok])
            his = np.array([est[pair][2] for est in ok])
            if taus.size:
                bias = float(taus.mean() - tau_true)
                rmse = float(np.sqrt(np.mean((taus - tau_true) ** 2)))
                covered = (los <= tau_true) & (tau_true <= his)
                coverage = float(covered.mean())
            else:
                bias = rmse = coverage = float("nan")
            cells[(tag, *pair)] = CellSummary(
                bias=bias, rmse=rmse, coverage=coverage, n_used=taus.size, n_failed=n_failed
            )
    return MonteCarloSummary(
        design_name=design_name,
        replications=R,
        seed=seed,
        estimators=tuple(estimators),
        contrasts=contrasts,
        cells=cells,
        unreliable=tuple(unreliable),
    )


@dataclass(frozen=True)
class RunOptions:
    """Estimation settings shared by every Monte Carlo replicate."""

    estimators: tuple[str, ...] = ALL_METHODS
    bootstrap_reps: int = 1000
    subclasses: int = 5
    clip: float | None = None
    level: float = 0.95
    gpsm_bootstrap: bool = False
    fixed_arm_sizes: bool = True
    ridge: float = 0.0

    def validate(self):
        unknown = [tag for tag in self.estimators if tag not in ALL_METHODS]
        if unknown:
            raise ConfigError(f"unknown estimator tags {unknown}; valid: {list(ALL_METHODS)}")


def _interval_rows(estimates: list[EffectEstimate]):
    return {
        (e.w, e.w_prime): (e.tau_hat, e.ci_lower, e.ci_upper) for e in estimates
    }


def run_replicate(design: SimulationDesign, seed: int, index: int, opts: RunOptions) -> ReplicateResult:
    """Generate, fit, estimate, and build CIs for one replicate.

    Failures are per estimator: a GPS fit failure takes down every
    score-based method but leaves DIF and COV standing.
    """
    root = np.random.SeedSequence((seed, index))
    gen_ss, boot_ss = root.spawn(2)
    d = generate(design, gen_ss, fixed_arm_sizes=opts.fixed_arm_sizes)
    estimates: dict = {}
    failures: dict = {}

    scores = None
    fit_error = None
    try:
        model = fit_multinomial_logit(d, ridge=opts.ridge)
        scores = predict_scores(model, d)
    except MultitreatError as e:
        fit_error = f"gps fit failed: {e}"

    boot_tags = [t for t in opts.estimators if t in BOOTSTRAP_TAGS]
    if opts.gpsm_bootstrap and "GPSM" in opts.estimators:
        boot_tags.append("GPSM")
    if boot_tags:
        need_scores = [t for t in boot_tags if t != "DIF"]
        runnable = boot_tags if scores is not None else [t for t in boot_tags if t == "DIF"]
        for tag in boot_tags:
            if tag not in runnable:
                failures[tag] = fit_error
        if runnable:
            spec = CiSpec(
                method="bootstrap-percentile",
                level=opts.level,
                bootstrap_reps=opts.bootstrap_reps,
                rng_seed=int(boot_ss.generate_state(1)[0]),
            )
            try:
                boot = bootstrap_ci(
                    d,
                    runnable,
                    spec,
                    clip=opts.clip,
                    subclasses=opts.subclasses,
                    ridge=opts.ridge,
                )
            except MultitreatError as e:
                for tag in runnable:
                    failures[tag] = str(e)
            else:
                for tag, res in boot.items():
                    if isinstance(res, MultitreatError):
                        failures[tag] = str(res)
                    else:
                        estimates[tag] = {
                            pair: (r.tau_hat, r.ci_lower, r.ci_upper) for pair, r in res.items()
                        }

    matching_plan = []
    if "COV" in opts.estimators:
        matching_plan.append(("COV", "covariates"))
    if "PSSM" in opts.estimators:
        matching_plan.append(("PSSM", "gps-vector"))
    if "GPSM" in opts.estimators and not opts.gpsm_bootstrap:
        matching_plan.append(("GPSM", "gps-scalar"))
    for tag, method in matching_plan:
        if method != "covariates" and scores is None:
            failures[tag] = fit_error
            continue
        try:
            imputed = impute_matrix(d, method, scores=scores)
            ests = effects_from_imputation(d, imputed, tag)
            intervals = matching_variance(d, imputed, level=opts.level)
            estimates[tag] = {
                (e.w, e.w_prime): (
                    e.tau_hat,
                    intervals[(e.w, e.w_prime)].ci_lower,
                    intervals[(e.w, e.w_prime)].ci_upper,
                )
                for e in ests
            }
        except MultitreatError as e:
            failures[tag] = str(e)

    if "PPSM" in opts.estimators:
        try:
            rows = {}
            for pair in contrast_pairs(design.T):
                est, imputed, sub = ppsm_components(d, pair, ridge=opts.ridge)
                interval = matching_variance(sub, imputed, level=opts.level)[(1, 2)]
                rows[pair] = (est.tau_hat, interval.ci_lower, interval.ci_upper)
            estimates["PPSM"] = rows
        except MultitreatError as e:
            failures["PPSM"] = str(e)

    return {"estimates": estimates, "failures": failures}


def _replicate_task(args):
    design, seed, index, opts = args
    return run_replicate(design, seed, index, opts)


def run_monte_carlo(
    design: SimulationDesign,
    estimators=None,
    replications: int = 1000,
    *,
    seed: int = 0,
    workers: int = 1,
    options: RunOptions | None = None,
) -> MonteCarloSummary:
    """Score estimators against the design's closed-form true effects.

    Replicate r draws its RNG streams from (seed, r), so results are
    identical for any worker count; aggregation runs in replicate order.
    """
    if replications < 1:
        raise ConfigError("need at least one replication")
    opts = options or RunOptions()
    if estimators is not None:
        opts = RunOptions(**{**opts.__dict__, "estimators": tuple(estimators)})
    opts.validate()
    tasks = [(design, seed, r, opts) for r in range(replications)]
    if workers <= 1:
        replicates = [_replicate_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunk = max(1, replications // (workers * 4))
            replicates = list(pool.map(_replicate_task, tasks, chunksize=chunk))
    return score_summary(
        replicates,
        design.true_effects(),
        design_name=design.name,
        seed=seed,
        estimators=opts.estimators,
    )


def summary_to_csv(summary: MonteCarloSummary, comment: str | None = None) -> str:
    """One row per estimator; bias, RMSE, and coverage column triples per contrast."""
    buf = io.StringIO()
    if comment:
        buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    pair_names = [f"{w}_{v}" for w, v in summary.contrasts]
    header = ["estimator"]
    for metric in ("bias", "rmse", "coverage"):
        header += [f"{metric}_{p}" for p in pair_names]
    header += ["n_failed"]
    writer.writerow(header)
    for tag in summary.estimators:
        row = [tag]
        for metric in ("bias", "rmse", "coverage"):
            for pair in summary.contrasts:
                row.append(format(getattr(summary.cell(tag, *pair), metric), ".6g"))
        row.append(max(summary.cell(tag, *pair).n_failed for pair in summary.contrasts))
        writer.writerow(row)
    return buf.getvalue()


def summary_to_json(summary: MonteCarloSummary) -> str:
    obj = {
        "design": summary.design_name,
        "replications": summary.replications,
        "seed": summary.seed,
        "unreliable": list(summary.unreliable),
        "cells": [
            {
                "estimator": tag,
                "w": w,
                "w_prime": v,
                "bias": summary.cell(tag, w, v).bias,
                "rmse": summary.cell(tag, w, v).rmse,
                "coverage": summary.cell(tag, w, v).coverage,
                "n_used": summary.cell(tag, w, v).n_used,
                "n_failed": summary.cell(tag, w, v).n_failed,
            }
            for tag in summary.estimators
            for w, v in summary.contrasts
        ],
    }
    return json.dumps(obj, indent=2, sort_keys=True)
