"""Observation containers shared by the learners, estimators and diagnostics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np


class DataError(ValueError):
    """Raised when input data violate a container contract."""


@dataclass(frozen=True)
class TreatmentLevel:
    index: int
    level_count: int

    def __post_init__(self) -> None:
        if self.level_count < 2:
            raise DataError(f"need at least 2 treatment levels, got {self.level_count}")
        if not 1 <= self.index <= self.level_count:
            raise DataError(f"treatment level {self.index} outside 1..{self.level_count}")


@dataclass(frozen=True)
class Dataset:
    """Binary outcomes, treatment levels coded 1..J, and a dense covariate matrix.

    The intercept is never stored; learners add it themselves.
    ``level_labels`` keeps the original treatment labels in index order.
    """

    outcomes: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    level_count: int
    column_names: tuple[str, ...] | None = None
    level_labels: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        y = np.asarray(self.outcomes, dtype=float)
        a = np.asarray(self.treatments)
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1)
        if y.ndim != 1 or a.ndim != 1 or X.ndim != 2:
            raise DataError("outcomes and treatments must be vectors, covariates a matrix")
        n = y.shape[0]
        if a.shape[0] != n or X.shape[0] != n:
            raise DataError(
                f"length mismatch: outcomes {n}, treatments {a.shape[0]}, covariates {X.shape[0]}"
            )
        if self.level_count < 2:
            raise DataError(f"need at least 2 treatment levels, got {self.level_count}")
        if not np.all((y == 0) | (y == 1)):
            k = int(np.flatnonzero((y != 0) & (y != 1))[0])
            raise DataError(f"non-binary outcome at row {k}")
        if not np.issubdtype(a.dtype, np.integer):
            if not np.all(np.mod(a, 1) == 0):
                raise DataError("treatment levels must be integers")
        a = a.astype(np.int64)
        if n and (a.min() < 1 or a.max() > self.level_count):
            raise DataError(f"treatment levels must lie in 1..{self.level_count}")
        if not np.all(np.isfinite(X)):
            r, c = np.argwhere(~np.isfinite(X))[0]
            raise DataError(f"non-finite covariate at row {r}, column {c}")
        if self.column_names is not None and len(self.column_names) != X.shape[1]:
            raise DataError("column_names length does not match covariate count")
        for name, arr in (("outcomes", y), ("treatments", a), ("covariates", X)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return int(self.outcomes.shape[0])

    @property
    def p(self) -> int:
        return int(self.covariates.shape[1])

    @property
    def codes(self) -> np.ndarray:
        """Zero-based treatment codes, convenient for array indexing."""
        return self.treatments - 1

    def label_of(self, level: int) -> str:
        if self.level_labels is None:
            return str(level)
        return self.level_labels[level - 1]

    def subset_columns(self, keep: Sequence[int]) -> "Dataset":
        names = None if self.column_names is None else tuple(self.column_names[k] for k in keep)
        return Dataset(
            self.outcomes,
            self.treatments,
            self.covariates[:, list(keep)],
            self.level_count,
            names,
            self.level_labels,
        )


def counts_per_level(d: Dataset) -> np.ndarray:
    return np.bincount(d.codes, minlength=d.level_count).astype(np.int64)


class PropensitySource(str, Enum):
    MULTINOMIAL = "multinomial"
    BINOMIAL = "binomial"


@dataclass(frozen=True)
class PropensityMatrix:
    """n x J generalized propensity scores.

    Rows of a multinomial matrix lie on the simplex; per-level binomial
    fits carry no such guarantee and are stored as fitted.
    """

    probs: np.ndarray
    source: PropensitySource = PropensitySource.MULTINOMIAL

    def __post_init__(self) -> None:
        P = np.asarray(self.probs, dtype=float)
        if P.ndim != 2:
            raise DataError("propensity matrix must be 2-D")
        if not np.all((P > 0) & (P < 1)):
            raise DataError("propensities must lie strictly inside (0, 1)")
        if self.source == PropensitySource.MULTINOMIAL:
            err = np.max(np.abs(P.sum(axis=1) - 1.0)) if P.size else 0.0
            if err > 1e-8:
                raise DataError(f"multinomial propensity rows must sum to 1 (max error {err:.3g})")
        P.setflags(write=False)
        object.__setattr__(self, "probs", P)
        object.__setattr__(self, "source", PropensitySource(self.source))

    @property
    def level_count(self) -> int:
        return int(self.probs.shape[1])


@dataclass(frozen=True)
class OutcomePredictionMatrix:
    """Entry (i, j) is the predicted E[y_i(j) | x_i]."""

    preds: np.ndarray

    def __post_init__(self) -> None:
        Q = np.asarray(self.preds, dtype=float)
        if Q.ndim != 2:
            raise DataError("outcome prediction matrix must be 2-D")
        if not np.all((Q >= 0) & (Q <= 1)):
            raise DataError("outcome predictions must lie in [0, 1]")
        Q.setflags(write=False)
        object.__setattr__(self, "preds", Q)


def load_csv(
    path: str | Path,
    outcome_col: str | None,
    treatment_col: str,
    covariate_cols: Sequence[str],
) -> Dataset:
    """Read a headered UTF-8 CSV into a :class:`Dataset`.

    Treatment labels are mapped to 1..J in order of first appearance.
    Missing values are not supported and raise :class:`DataError`.
    ``outcome_col=None`` fills outcomes with zeros (treatment-only use).
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        index = {name: k for k, name in enumerate(header)}
        for col in [outcome_col, treatment_col, *covariate_cols]:
            if col is not None and col not in index:
                raise DataError(f"missing column {col!r}")
        iy = None if outcome_col is None else index[outcome_col]
        ia = index[treatment_col]
        ix = [index[c] for c in covariate_cols]

        y: list[float] = []
        labels: list[str] = []
        rows: list[list[float]] = []
        for k, row in enumerate(reader, start=1):
            if not row:
                continue
            if len(row) != len(header):
                raise DataError(f"row {k}: expected {len(header)} fields, got {len(row)}")
            raw = "0" if iy is None else row[iy].strip()
            if raw not in ("0", "1", "0.0", "1.0"):
                raise DataError(f"non-binary outcome at row {k}: {raw!r}")
            y.append(float(raw))
            lab = row[ia].strip()
            if lab == "":
                raise DataError(f"missing treatment at row {k}")
            labels.append(lab)
            vals = []
            for c, j in zip(covariate_cols, ix):
                try:
                    v = float(row[j])
                except ValueError:
                    raise DataError(f"unparseable value {row[j]!r} at row {k}, column {c!r}") from None
                if not math.isfinite(v):
                    raise DataError(f"non-finite covariate at row {k}, column {c!r}")
                vals.append(v)
            rows.append(vals)

    level_of: dict[str, int] = {}
    for lab in labels:
        level_of.setdefault(lab, len(level_of) + 1)
    if len(level_of) < 2:
        raise DataError("need at least 2 distinct treatment levels")
    a = np.array([level_of[lab] for lab in labels], dtype=np.int64)
    X = np.array(rows, dtype=float).reshape(len(rows), len(covariate_cols))
    return Dataset(
        np.array(y),
        a,
        X,
        len(level_of),
        column_names=tuple(covariate_cols),
        level_labels=tuple(level_of),
    )


def write_csv(
    d: Dataset,
    path: str | Path,
    outcome_col: str = "y",
    treatment_col: str = "a",
) -> None:
    """Write ``d`` with original treatment labels; floats use ``repr`` so values round-trip."""
    names = d.column_names or tuple(f"x{k + 1}" for k in range(d.p))
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([outcome_col, treatment_col, *names])
        for i in range(d.n):
            w.writerow(
                [
                    int(d.outcomes[i]),
                    d.label_of(int(d.treatments[i])),
                    *(repr(float(v)) for v in d.covariates[i]),
                ]
            )
