"""Tabular data model, CSV ingestion, and validation for observational studies.

A :class:`Dataset` holds an N x K covariate matrix, integer treatment labels
in {1..T}, and a real outcome vector. Treatment labels from raw files may be
arbitrary strings; they are re-encoded to contiguous 1..T in order of first
appearance and the original labels are kept for round-tripping.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class CsvSchema:
    """Column-role mapping for CSV ingestion."""

    treatment: str
    outcome: str
    covariates: list[str]
    delimiter: str = ","

    def validate(self) -> None:
        if not self.treatment or not self.outcome:
            raise ConfigError("schema must name a treatment column and an outcome column")
        if not self.covariates:
            raise ConfigError("schema must name at least one covariate column")
        roles = [self.treatment, self.outcome, *self.covariates]
        if len(set(roles)) != len(roles):
            raise ConfigError("schema assigns the same column to more than one role")


@dataclass(frozen=True)
class Dataset:
    """Immutable observational sample: covariates, treatment labels, outcome.

    Attributes:
        covariates: (N, K) float matrix. If ``has_intercept`` the first
            column is identically 1.
        treatment: (N,) int labels in {1..T}, every level occurring at least once.
        outcome: (N,) float outcomes.
        covariate_names: K column names.
        treatment_labels: original labels, position w-1 holds the raw label
            encoded as level w.
    """

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    covariate_names: list[str] = field(default_factory=list)
    treatment_labels: list[str] = field(default_factory=list)
    has_intercept: bool = False

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        W = np.asarray(self.treatment, dtype=int)
        Y = np.asarray(self.outcome, dtype=float)
        if X.ndim != 2:
            raise DataError("covariates must be a 2-D matrix")
        n = X.shape[0]
        if n < 1:
            raise DataError("dataset must contain at least one unit")
        if W.shape != (n,) or Y.shape != (n,):
            raise DataError(
                f"length mismatch: covariates N={n}, treatment N={W.shape}, outcome N={Y.shape}"
            )
        if not np.all(np.isfinite(X)):
            i, j = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite covariate value at row {i}, column {self._colname(j)}")
        if not np.all(np.isfinite(Y)):
            i = int(np.flatnonzero(~np.isfinite(Y))[0])
            raise DataError(f"non-finite outcome value at row {i}")
        levels = np.unique(W)
        T = self.T
        if levels[0] < 1 or levels[-1] > T or len(levels) != T:
            missing = sorted(set(range(1, T + 1)) - set(levels.tolist()))
            raise DataError(
                f"treatment labels must cover 1..{T}; missing levels {missing}"
                if missing
                else f"treatment labels must lie in 1..{T}"
            )
        names = list(self.covariate_names) or [f"x{j}" for j in range(X.shape[1])]
        if len(names) != X.shape[1]:
            raise DataError("covariate_names length does not match covariate columns")
        if self.has_intercept and not np.all(X[:, 0] == 1.0):
            raise DataError("intercept flag set but first column is not identically 1")
        labels = list(self.treatment_labels) or [str(w) for w in range(1, T + 1)]
        if len(labels) != T:
            raise DataError("treatment_labels length does not match number of levels")
        X = X.copy()
        W = W.copy()
        Y = Y.copy()
        for arr in (X, W, Y):
            arr.flags.writeable = False
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "treatment", W)
        object.__setattr__(self, "outcome", Y)
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "treatment_labels", labels)

    def _colname(self, j: int) -> str:
        names = list(self.covariate_names)
        return names[j] if j < len(names) else f"column {j}"

    @property
    def n_units(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    @property
    def T(self) -> int:
        return int(np.max(self.treatment))

    def arm_counts(self) -> np.ndarray:
        """Unit counts per treatment level, index w-1 for level w."""
        return np.bincount(self.treatment, minlength=self.T + 1)[1:]

    def arm_indices(self, w: int) -> np.ndarray:
        return np.flatnonzero(self.treatment == w)

    def label_for(self, w: int) -> str:
        return self.treatment_labels[w - 1]


@dataclass(frozen=True)
class UnitMask:
    """Boolean retention mask over a dataset, with per-level retained counts."""

    retained: np.ndarray
    level_counts: np.ndarray

    @classmethod
    def from_dataset(cls, d: Dataset, retained: np.ndarray) -> "UnitMask":
        retained = np.asarray(retained, dtype=bool)
        if retained.shape != (d.n_units,):
            raise DataError(f"mask length {retained.shape} does not match N={d.n_units}")
        counts = np.bincount(d.treatment[retained], minlength=d.T + 1)[1:]
        mask = cls(retained=retained.copy(), level_counts=counts)
        mask.retained.flags.writeable = False
        mask.level_counts.flags.writeable = False
        return mask

    @property
    def n_retained(self) -> int:
        return int(self.retained.sum())


def apply_mask(d: Dataset, m: UnitMask) -> Dataset:
    """Subset a dataset to the retained units, preserving order.

    Fails if the mask eliminates any treatment level, identifying the lost
    level by its original label.
    """
    retained = np.asarray(m.retained, dtype=bool)
    if retained.shape != (d.n_units,):
        raise DataError(f"mask length {retained.shape[0]} does not match N={d.n_units}")
    kept_levels = set(np.unique(d.treatment[retained]).tolist())
    lost = [w for w in range(1, d.T + 1) if w not in kept_levels]
    if lost:
        lost_desc = ", ".join(f"{d.label_for(w)!r} (level {w})" for w in lost)
        raise DataError(f"mask eliminates treatment level(s) {lost_desc}")
    return Dataset(
        covariates=d.covariates[retained],
        treatment=d.treatment[retained],
        outcome=d.outcome[retained],
        covariate_names=list(d.covariate_names),
        treatment_labels=list(d.treatment_labels),
        has_intercept=d.has_intercept,
    )


def _parse_cell(raw: str, row: int, col: str) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise DataError(f"non-numeric value {raw!r} at row {row}, column {col!r}") from None
    if not np.isfinite(value):
        raise DataError(f"non-finite value {raw!r} at row {row}, column {col!r}")
    return value


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Load and validate a delimited text file under a column-role schema.

    Treatment labels are re-encoded to contiguous 1..T in order of first
    appearance; the original label strings are recorded on the dataset.
    Rows with missing or non-numeric cells are rejected with the offending
    row and column named.
    """
    schema.validate()
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise ConfigError(f"cannot open input file {path}: {e}") from None
    with fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        positions = {}
        for role_col in [schema.treatment, schema.outcome, *schema.covariates]:
            if role_col not in header:
                raise DataError(f"missing column {role_col!r} (file has {header})")
            positions[role_col] = header.index(role_col)

        cov_rows: list[list[float]] = []
        outcomes: list[float] = []
        raw_labels: list[str] = []
        for row_num, row in enumerate(reader):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {row_num}: expected {len(header)} cells, found {len(row)}")
            label = row[positions[schema.treatment]].strip()
            if not label:
                raise DataError(f"missing value at row {row_num}, column {schema.treatment!r}")
            raw_labels.append(label)
            outcomes.append(_parse_cell(row[positions[schema.outcome]].strip(), row_num, schema.outcome))
            cov_rows.append(
                [_parse_cell(row[positions[c]].strip(), row_num, c) for c in schema.covariates]
            )
    if not raw_labels:
        raise DataError(f"{path}: no data rows")

    label_order: dict[str, int] = {}
    for label in raw_labels:
        if label not in label_order:
            label_order[label] = len(label_order) + 1
    W = np.array([label_order[label] for label in raw_labels], dtype=int)

    X = np.asarray(cov_rows, dtype=float)
    has_intercept = bool(np.all(X[:, 0] == 1.0))
    return Dataset(
        covariates=X,
        treatment=W,
        outcome=np.asarray(outcomes, dtype=float),
        covariate_names=list(schema.covariates),
        treatment_labels=list(label_order),
        has_intercept=has_intercept,
    )


def save_csv(d: Dataset, path, schema: CsvSchema | None = None) -> None:
    """Write a dataset back to CSV with 17-significant-digit floats.

    The float format guarantees that load -> save -> load round-trips
    covariates and outcomes exactly; treatment cells carry the original
    labels.
    """
    if schema is None:
        schema = CsvSchema(treatment="treatment", outcome="outcome", covariates=list(d.covariate_names))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter=schema.delimiter)
        writer.writerow([schema.treatment, schema.outcome, *schema.covariates])
        for i in range(d.n_units):
            writer.writerow(
                [
                    d.label_for(int(d.treatment[i])),
                    format(d.outcome[i], ".17g"),
                    *(format(v, ".17g") for v in d.covariates[i]),
                ]
            )
