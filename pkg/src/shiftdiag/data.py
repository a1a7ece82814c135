"""Tabular data containers, loss computation, splitting and feature filtering.

A :class:`Dataset` holds one domain's rows: features, a binary outcome, the
frozen model's predictions and the per-row loss. Instances are immutable; every
operation returns a new object.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import stats

from .errors import (
    EmptyInputError,
    InsufficientDataError,
    ParseError,
    SchemaError,
    ValidationError,
)

SOURCE = 0
TARGET = 1


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Dataset:
    """Rows from one domain.

    Parameters
    ----------
    features : ndarray of shape (n, d)
        Numeric feature matrix.
    outcome : ndarray of shape (n,)
        Binary outcome, exactly 0 or 1.
    domain : int
        ``SOURCE`` (0) or ``TARGET`` (1).
    predictions : ndarray of shape (n,), optional
        Frozen-model outputs in [0, 1]. ``None`` until a model is attached.
    loss : ndarray of shape (n,), optional
        Per-row loss; zeros when not yet computed.
    column_names : sequence of str, optional
        Unique feature names; defaults to ``x1 .. xd``.
    """

    features: np.ndarray
    outcome: np.ndarray
    domain: int = SOURCE
    predictions: np.ndarray | None = None
    loss: np.ndarray | None = None
    column_names: tuple[str, ...] = field(default=())

    def __post_init__(self):
        X = np.asarray(self.features, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[1] < 1:
            raise ValidationError("features must be a 2-d matrix with at least one column")
        n, d = X.shape
        y = np.asarray(self.outcome, dtype=float).ravel()
        if y.shape[0] != n:
            raise ValidationError(f"outcome has {y.shape[0]} entries, expected {n}")
        if not np.all((y == 0) | (y == 1)):
            raise ValidationError("outcome values must be exactly 0 or 1")
        if self.domain not in (SOURCE, TARGET):
            raise ValidationError(f"domain must be 0 or 1, got {self.domain!r}")
        if not np.all(np.isfinite(X)):
            raise ValidationError("features must be finite")
        names = tuple(self.column_names) or tuple(f"x{j + 1}" for j in range(d))
        if len(names) != d:
            raise ValidationError(f"{len(names)} column names for {d} feature columns")
        if len(set(names)) != d:
            raise ValidationError("column names must be unique")
        preds = None
        if self.predictions is not None:
            preds = np.asarray(self.predictions, dtype=float).ravel()
            if preds.shape[0] != n:
                raise ValidationError(f"predictions have {preds.shape[0]} entries, expected {n}")
            preds = _frozen(preds)
        loss = np.zeros(n) if self.loss is None else np.asarray(self.loss, dtype=float).ravel()
        if loss.shape[0] != n:
            raise ValidationError(f"loss has {loss.shape[0]} entries, expected {n}")
        if not np.all(np.isfinite(loss)) or np.any(loss < 0):
            raise ValidationError("losses must be finite and nonnegative")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "outcome", _frozen(y.astype(np.int64), dtype=np.int64))
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "loss", _frozen(loss))
        object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def take(self, rows) -> "Dataset":
        """Return the rows selected by an index array or boolean mask."""
        rows = np.asarray(rows)
        return replace(
            self,
            features=self.features[rows],
            outcome=self.outcome[rows],
            predictions=None if self.predictions is None else self.predictions[rows],
            loss=self.loss[rows],
        )

    def column_index(self, name: str) -> int:
        try:
            return self.column_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown feature column {name!r}") from None

    def equals(self, other: "Dataset", atol: float = 0.0) -> bool:
        """Field-wise comparison, with an optional absolute tolerance on reals."""
        if self.column_names != other.column_names or self.domain != other.domain:
            return False
        if self.features.shape != other.features.shape:
            return False
        if (self.predictions is None) != (other.predictions is None):
            return False
        same = np.allclose(self.features, other.features, rtol=0, atol=atol)
        same &= np.array_equal(self.outcome, other.outcome)
        same &= np.allclose(self.loss, other.loss, rtol=0, atol=atol)
        if self.predictions is not None:
            same &= np.allclose(self.predictions, other.predictions, rtol=0, atol=atol)
        return bool(same)


@dataclass(frozen=True)
class SplitPair:
    """Disjoint training and evaluation partitions of one dataset."""

    train: Dataset
    eval: Dataset
    split_fraction: float
    seed: int
    train_rows: np.ndarray = field(repr=False, default=None)
    eval_rows: np.ndarray = field(repr=False, default=None)


@dataclass(frozen=True)
class FeatureSubset:
    """A named, ordered set of feature column indices."""

    name: str
    column_indices: tuple[int, ...]

    def __post_init__(self):
        idx = tuple(int(i) for i in self.column_indices)
        if len(idx) == 0:
            raise ValidationError(f"feature subset {self.name!r} is empty")
        if len(set(idx)) != len(idx):
            raise ValidationError(f"feature subset {self.name!r} has duplicate indices")
        if min(idx) < 0:
            raise ValidationError(f"feature subset {self.name!r} has a negative index")
        object.__setattr__(self, "column_indices", idx)

    def check(self, d: int) -> "FeatureSubset":
        if max(self.column_indices) >= d:
            raise ValidationError(
                f"feature subset {self.name!r} references column {max(self.column_indices)} "
                f"but the data have {d} columns"
            )
        return self

    @classmethod
    def from_names(cls, name: str, columns: Sequence[str], column_names: Sequence[str]):
        lookup = {c: i for i, c in enumerate(column_names)}
        missing = [c for c in columns if c not in lookup]
        if missing:
            raise SchemaError(f"subset {name!r} references unknown columns {missing}")
        return cls(name, tuple(lookup[c] for c in columns))


@dataclass(frozen=True)
class Schema:
    """Column roles for CSV ingestion.

    ``features`` may be left empty, in which case every column other than the
    outcome and prediction columns is a feature, in file order.
    """

    outcome: str
    prediction: str
    features: tuple[str, ...] = ()


def load_dataset(path, schema: Schema, domain: int) -> Dataset:
    """Read a CSV file with a header row into a :class:`Dataset`.

    Losses are left at zero; call :func:`compute_loss` afterwards.

    Raises
    ------
    EmptyInputError
        The file has no header or no data rows.
    SchemaError
        A named column is absent.
    ParseError
        A cell is not a finite number; the message names row and column.
    ValidationError
        The file cannot be opened.
    """
    path = Path(path)
    try:
        with path.open(newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None or not any(h.strip() for h in header):
                raise EmptyInputError(f"{path}: empty file")
            header = [h.strip() for h in header]
            rows = [r for r in reader if r and any(c.strip() for c in r)]
    except OSError as exc:
        raise ValidationError(f"{path}: cannot read file ({exc.strerror})") from None
    if not rows:
        raise EmptyInputError(f"{path}: no data rows")
    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names in header")
    for role, col in (("outcome", schema.outcome), ("prediction", schema.prediction)):
        if col not in header:
            raise SchemaError(f"{path}: {role} column {col!r} not found")
    features = tuple(schema.features) or tuple(
        h for h in header if h not in (schema.outcome, schema.prediction)
    )
    if not features:
        raise SchemaError(f"{path}: no feature columns")
    for col in features:
        if col not in header:
            raise SchemaError(f"{path}: feature column {col!r} not found")
    pos = {h: i for i, h in enumerate(header)}
    wanted = list(features) + [schema.outcome, schema.prediction]
    values = np.empty((len(rows), len(wanted)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(
                f"{path}: row {r + 1} has {len(row)} cells, expected {len(header)}", row=r + 1
            )
        for c, col in enumerate(wanted):
            cell = row[pos[col]].strip()
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise ParseError(
                    f"{path}: row {r + 1}, column {col!r}: cannot parse {cell!r} as a number",
                    row=r + 1,
                    column=col,
                )
            values[r, c] = v
    k = len(features)
    y = values[:, k]
    if not np.all((y == 0) | (y == 1)):
        bad = int(np.flatnonzero((y != 0) & (y != 1))[0])
        raise ValidationError(
            f"{path}: row {bad + 1}, column {schema.outcome!r}: outcome must be 0 or 1"
        )
    return Dataset(
        features=values[:, :k],
        outcome=y,
        domain=domain,
        predictions=values[:, k + 1],
        column_names=features,
    )


def write_dataset(ds: Dataset, path, outcome: str = "y", prediction: str = "pred") -> None:
    """Write a dataset as CSV using shortest round-trip float formatting."""
    if ds.predictions is None:
        raise ValidationError("cannot write a dataset without predictions")
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(ds.column_names) + [outcome, prediction])
        for i in range(ds.n):
            w.writerow(
                [repr(float(v)) for v in ds.features[i]]
                + [str(int(ds.outcome[i])), repr(float(ds.predictions[i]))]
            )


def threshold_predictions(pred) -> np.ndarray:
    """Hard labels from scores in [0, 1]; exactly 0.5 maps to 1."""
    return (np.asarray(pred, dtype=float) >= 0.5).astype(np.int64)


def zero_one_loss(y, pred) -> np.ndarray:
    """Zero-one loss of thresholded predictions against binary outcomes."""
    return (threshold_predictions(pred) != np.asarray(y)).astype(float)


def compute_loss(ds: Dataset, loss_kind: str = "zero_one") -> Dataset:
    """Populate ``ds.loss`` from predictions and outcomes.

    Raises
    ------
    ValidationError
        Predictions are missing or fall outside [0, 1], or the loss kind is
        not supported.
    """
    if loss_kind != "zero_one":
        raise ValidationError(f"unsupported loss kind {loss_kind!r}")
    if ds.predictions is None:
        raise ValidationError("predictions are not populated")
    p = ds.predictions
    if np.any(p < 0) or np.any(p > 1):
        raise ValidationError("predictions must lie in [0, 1]")
    return replace(ds, loss=zero_one_loss(ds.outcome, p))


def split(ds: Dataset, fraction: float, seed: int) -> SplitPair:
    """Stratified random split into training and evaluation parts.

    The training part receives ``round(fraction * n)`` rows. Within each
    outcome class rows are shuffled with a generator seeded by ``seed``; class
    quotas are allocated by largest remainder so the total is exact.
    """
    if not 0 < fraction < 1:
        raise ValidationError(f"split fraction must be in (0, 1), got {fraction}")
    if ds.n < 2:
        raise InsufficientDataError(f"need at least 2 rows to split, got {ds.n}")
    rng = np.random.default_rng(seed)
    n_train = int(np.floor(fraction * ds.n + 0.5))
    n_train = min(max(n_train, 1), ds.n - 1)
    groups = [np.flatnonzero(ds.outcome == c) for c in (0, 1)]
    exact = [fraction * len(g) for g in groups]
    quota = [int(np.floor(e)) for e in exact]
    order = np.argsort([-(e - q) for e, q in zip(exact, quota)], kind="stable")
    for k in order[: n_train - sum(quota)]:
        quota[k] += 1
    train_rows = []
    for g, q in zip(groups, quota):
        perm = g[rng.permutation(len(g))]
        train_rows.append(perm[:q])
    train_rows = np.sort(np.concatenate(train_rows))
    mask = np.zeros(ds.n, dtype=bool)
    mask[train_rows] = True
    eval_rows = np.flatnonzero(~mask)
    return SplitPair(
        train=ds.take(train_rows),
        eval=ds.take(eval_rows),
        split_fraction=fraction,
        seed=seed,
        train_rows=train_rows,
        eval_rows=eval_rows,
    )


def _quadratic_fit_pvalue(x: np.ndarray, loss: np.ndarray, domain: np.ndarray) -> float:
    """Partial F-test p-value for ``x`` and ``x^2`` in a regression of the loss.

    The reduced model has an intercept and a domain indicator, the full model
    adds the standardized feature and its square. The degrees of freedom
    follow the rank of each design, so a binary feature is tested with one
    degree of freedom.
    """
    n = x.shape[0]
    z = (x - x.mean()) / x.std()
    reduced = np.column_stack([np.ones(n), domain])
    full = np.column_stack([reduced, z, z * z])

    def fit(design):
        coef, _, rank, _ = np.linalg.lstsq(design, loss, rcond=None)
        r = loss - design @ coef
        return float(r @ r), int(rank)

    rss0, rank0 = fit(reduced)
    rss1, rank1 = fit(full)
    df1, df2 = rank1 - rank0, n - rank1
    if df1 < 1 or df2 < 1 or rss0 <= 0:
        return 1.0
    if rss1 <= 1e-12 * rss0:
        return 0.0
    f = ((rss0 - rss1) / df1) / (rss1 / df2)
    return float(stats.f.sf(f, df1, df2))


def loss_association_pvalues(train_source: Dataset, train_target: Dataset) -> np.ndarray:
    """Per-feature p-values for association with the pooled training loss.

    Each feature is tested by adding it and its square to a regression of the
    loss on a domain indicator. The square detects losses that rise or fall in
    both tails; the indicator keeps a feature whose distribution shifts from
    looking associated merely because the average loss also differs between
    domains. Constant columns get p-value 1.
    """
    X = np.vstack([train_source.features, train_target.features])
    loss = np.concatenate([train_source.loss, train_target.loss]).astype(float)
    domain = np.concatenate([np.zeros(train_source.n), np.ones(train_target.n)])
    out = np.ones(X.shape[1])
    for j in range(X.shape[1]):
        if np.ptp(X[:, j]) > 0:
            out[j] = _quadratic_fit_pvalue(X[:, j], loss, domain)
    return out


def filter_loss_correlated(
    train_source: Dataset, train_target: Dataset, alpha_corr: float = 0.05
) -> FeatureSubset | None:
    """Features significantly associated with the loss on pooled training data.

    Returns ``None`` when no feature passes, which callers treat as "no
    covariate can explain a change in loss".
    """
    if train_source.d != train_target.d:
        raise ValidationError("source and target have different feature counts")
    X = np.vstack([train_source.features, train_target.features])
    constant = [train_source.column_names[j] for j in range(X.shape[1]) if np.ptp(X[:, j]) == 0]
    if constant:
        warnings.warn(f"constant feature columns excluded from the loss filter: {constant}")
    p = loss_association_pvalues(train_source, train_target)
    keep = tuple(int(j) for j in np.flatnonzero(p <= alpha_corr))
    if not keep:
        warnings.warn("no feature is associated with the loss at the requested level")
        return None
    return FeatureSubset("loss_correlated", keep)
