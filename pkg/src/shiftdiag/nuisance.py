"""Nuisance functions: conditional losses, outcome bins and density ratios.

All objects here are fitted on training partitions and then evaluated on
evaluation rows (or on hybrid rows built from two evaluation rows). They are
immutable callables.

Conventions
-----------
``model`` is the frozen prediction function under audit: it maps a feature
matrix to scores in [0, 1], and the hard label is ``score >= 0.5``. For the
zero-one loss the conditional expected loss given an outcome probability
``mu`` is ``1 - mu`` where the model predicts 1 and ``mu`` where it predicts 0.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
from scipy.special import logit

from .data import Dataset, FeatureSubset, threshold_predictions
from .errors import DegenerateDetectorError, DegenerateLabelError, InsufficientDataError
from .learners import CvConfig, ProbModel, RegressionModel, fit_prob_classifier, fit_regressor

DEFAULT_BINS = 40
DEFAULT_CLIP = 1e-3

FrozenModel = Callable[[np.ndarray], np.ndarray]


def bin_code(p, B: int = DEFAULT_BINS):
    """Integer bin index ``floor(p * B + 1/2)`` in ``0 .. B``."""
    return np.floor(np.asarray(p, dtype=float) * B + 0.5).astype(np.int64)


def bin_mu(p, B: int = DEFAULT_BINS):
    """Round a probability to the nearest multiple of ``1/B``, halves up.

    Examples
    --------
    >>> float(bin_mu(0.012, 40)), float(bin_mu(0.0125, 40))
    (0.0, 0.025)
    """
    out = bin_code(p, B) / B
    return float(out) if np.ndim(out) == 0 else out


def bin_feature(codes, B: int = DEFAULT_BINS) -> np.ndarray:
    """Learner input encoding a bin: logit of the bin center, kept off 0 and 1.

    The transform is strictly increasing in the bin index, so it carries the
    same information as the bin value while giving linear learners a scale on
    which outcome probabilities are roughly additive.
    """
    c = np.clip(np.asarray(codes, dtype=float) / B, 0.5 / B, 1 - 0.5 / B)
    return logit(c)


def conditional_zero_one_loss(pred, mu) -> np.ndarray:
    """Expected zero-one loss of hard labels ``pred >= 0.5`` when P(Y=1) = mu."""
    return np.where(threshold_predictions(pred) == 1, 1.0 - np.asarray(mu), np.asarray(mu))


def _cols(X, cols):
    return np.asarray(X, dtype=float)[:, list(cols)]


# ---------------------------------------------------------------------------
# Outcome models


@dataclass(frozen=True, eq=False)
class OutcomeModels:
    """Per-domain outcome probabilities and the implied conditional losses."""

    mu0_model: ProbModel
    mu1_model: ProbModel
    model: FrozenModel
    bins: int = DEFAULT_BINS

    def mu0(self, X) -> np.ndarray:
        return self.mu0_model.predict(X)

    def mu1(self, X) -> np.ndarray:
        return self.mu1_model.predict(X)

    def z0(self, X) -> np.ndarray:
        return conditional_zero_one_loss(self.model(X), self.mu0(X))

    def z1(self, X) -> np.ndarray:
        return conditional_zero_one_loss(self.model(X), self.mu1(X))

    def bin_codes(self, X) -> np.ndarray:
        return bin_code(self.mu0(X), self.bins)

    def mu_bin(self, X) -> np.ndarray:
        return self.bin_codes(X) / self.bins

    def to_dict(self) -> dict:
        return {"mu0": self.mu0_model.to_dict(), "mu1": self.mu1_model.to_dict(),
                "bins": self.bins}


def fit_outcome_models(
    train_source: Dataset,
    train_target: Dataset,
    model: FrozenModel,
    cfg: CvConfig = CvConfig(),
    bins: int = DEFAULT_BINS,
) -> OutcomeModels:
    """Fit P(Y=1 | x) separately in each domain."""
    mu0 = fit_prob_classifier(train_source.features, train_source.outcome, cfg)
    mu1 = fit_prob_classifier(train_target.features, train_target.outcome, cfg)
    return OutcomeModels(mu0, mu1, model, bins)


@dataclass(frozen=True, eq=False)
class ShiftedOutcome:
    """Target outcome model that only sees ``x_s`` and the source outcome bin."""

    ps_model: ProbModel
    subset: FeatureSubset
    outcome: OutcomeModels

    def prob(self, xs, codes) -> np.ndarray:
        """P(Y=1 | x_s, bin) under the target domain."""
        Z = np.column_stack([np.asarray(xs, dtype=float), bin_feature(codes, self.outcome.bins)])
        return self.ps_model.predict(Z)

    def zs(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        p = self.prob(_cols(X, self.subset.column_indices), self.outcome.bin_codes(X))
        return conditional_zero_one_loss(self.outcome.model(X), p)

    __call__ = zs

    def to_dict(self) -> dict:
        return {"subset": self.subset.name, "columns": list(self.subset.column_indices),
                "ps": self.ps_model.to_dict()}


def fit_shifted_outcome(
    train_target: Dataset, s: FeatureSubset, outcome: OutcomeModels, cfg: CvConfig = CvConfig()
) -> ShiftedOutcome:
    """Regress the target outcome on ``x_s`` and the binned source probability."""
    s.check(train_target.d)
    X = train_target.features
    Z = np.column_stack([_cols(X, s.column_indices), bin_feature(outcome.bin_codes(X), outcome.bins)])
    ps = fit_prob_classifier(Z, train_target.outcome, cfg)
    return ShiftedOutcome(ps, s, outcome)


# ---------------------------------------------------------------------------
# Loss regressions


@dataclass(frozen=True, eq=False)
class LossRegression:
    """A [0, 1]-valued regression on a subset of columns, optionally plus a detector.

    With no fitted model the prediction is the stored constant.
    """

    model: RegressionModel | None
    columns: tuple[int, ...]
    constant: float = 0.0
    detector: Callable | None = None
    probabilistic: bool = False

    def inputs(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        parts = [_cols(X, self.columns)]
        if self.detector is not None:
            parts.append(self.detector(X)[:, None].astype(float))
        return np.hstack(parts)

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.model is None:
            return np.full(X.shape[0], self.constant)
        return np.clip(self.model.predict(self.inputs(X)), 0.0, 1.0)

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "uses_detector": self.detector is not None,
            "constant": self.constant,
            "model": None if self.model is None else self.model.to_dict(),
        }


def _fit_loss_regression(X_in, target, columns, cfg, detector=None, probabilistic=False):
    target = np.asarray(target, dtype=float)
    if np.ptp(target) == 0 or X_in.shape[1] == 0:
        return LossRegression(None, columns, float(target.mean()), detector)
    if probabilistic:
        model = fit_prob_classifier(X_in, target, cfg)
    else:
        model = fit_regressor(X_in, target, cfg)
    return LossRegression(model, columns, float(target.mean()), detector, probabilistic)


def fit_conditional_loss_subset(
    train_source: Dataset, s: FeatureSubset, detector: Callable, cfg: CvConfig = CvConfig()
) -> LossRegression:
    """Regress the source loss on ``x_s`` and the detector indicator.

    When the detector is constant on the training rows the indicator carries
    no information and the fit uses ``x_s`` alone.
    """
    s.check(train_source.d)
    X = train_source.features
    h = np.asarray(detector(X), dtype=float)
    det = detector if np.ptp(h) > 0 else None
    cols = tuple(s.column_indices)
    Xin = _cols(X, cols) if det is None else np.hstack([_cols(X, cols), h[:, None].astype(float)])
    return _fit_loss_regression(Xin, train_source.loss, cols, cfg, det)


def fit_detector_weighted_loss(
    train_source: Dataset, columns, detector: Callable, cfg: CvConfig = CvConfig()
) -> LossRegression:
    """Regress ``loss * h(x)`` on the given source columns.

    This is the source conditional mean of the detector-restricted loss given
    ``x_s``. With no columns it is the overall mean.
    """
    cols = tuple(int(c) for c in columns)
    X = train_source.features
    target = train_source.loss * np.asarray(detector(X), dtype=float)
    return _fit_loss_regression(_cols(X, cols), target, cols, cfg)


def fit_covariate_loss(
    train_source: Dataset, columns, outcome: OutcomeModels | None, cfg: CvConfig = CvConfig()
):
    """Source conditional loss given the covariate-test columns.

    When the columns are all features the loss is computed from the fitted
    source outcome model, as for the outcome tests. Otherwise the frozen model
    depends on columns outside the conditioning set, and the fitted
    conditional loss on all features is regressed on the retained columns.
    Regressing the smooth fitted loss rather than the 0/1 loss targets the
    same conditional mean with far less noise. Without outcome models the 0/1
    loss is regressed with a probabilistic classifier.
    """
    cols = tuple(int(c) for c in columns)
    if outcome is not None and cols == tuple(range(train_source.d)):
        return outcome.z0
    X = train_source.features
    if outcome is None:
        return _fit_loss_regression(_cols(X, cols), train_source.loss, cols, cfg,
                                    probabilistic=True)
    return _fit_loss_regression(_cols(X, cols), outcome.z0(X), cols, cfg)


# ---------------------------------------------------------------------------
# Density ratios


def _odds(q, clip):
    q = np.clip(q, clip, 1.0 - clip)
    return q / (1.0 - q)


@dataclass(frozen=True, eq=False)
class DensityRatio:
    """Target-to-source density ratio on a set of columns.

    The domain classifier is trained with class weights that equalize the two
    domains, so its odds estimate the density ratio without a prior
    correction. Probabilities are clipped to ``[clip, 1 - clip]`` first.
    """

    model: ProbModel | None
    columns: tuple[int, ...]
    clip: float = DEFAULT_CLIP

    def __call__(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if self.model is None:
            return np.ones(X.shape[0])
        return _odds(self.model.predict(_cols(X, self.columns)), self.clip)

    @property
    def bounds(self) -> tuple[float, float]:
        return self.clip / (1 - self.clip), (1 - self.clip) / self.clip

    def to_dict(self) -> dict:
        return {"columns": list(self.columns), "clip": self.clip,
                "model": None if self.model is None else self.model.to_dict()}


def balanced_weights(labels) -> np.ndarray:
    """Weights giving each class the same total mass, averaging one per row."""
    labels = np.asarray(labels).astype(np.int64)
    counts = np.bincount(labels, minlength=2).astype(float)
    return (labels.size / (2.0 * counts))[labels]


def fit_density_ratio(
    train_source: Dataset,
    train_target: Dataset,
    columns=None,
    cfg: CvConfig = CvConfig(),
    clip: float = DEFAULT_CLIP,
) -> DensityRatio:
    """Estimate ``p1(x_cols) / p0(x_cols)`` with a pooled domain classifier.

    ``columns=None`` uses every feature; an empty column list gives the
    constant ratio 1.
    """
    cols = tuple(range(train_source.d)) if columns is None else tuple(int(c) for c in columns)
    if not cols:
        return DensityRatio(None, cols, clip)
    X = np.vstack([_cols(train_source.features, cols), _cols(train_target.features, cols)])
    d = np.concatenate([np.zeros(train_source.n), np.ones(train_target.n)])
    model = fit_prob_classifier(X, d, cfg, sample_weight=balanced_weights(d))
    return DensityRatio(model, cols, clip)


@dataclass(frozen=True, eq=False)
class VStatRatio:
    """Ratio of ``x_{-s}`` densities with and without conditioning on ``x_s``.

    Both densities are target densities conditional on the source outcome bin.
    The ratio is only meaningful where the hybrid row ``(x_s, x_{-s})`` falls in
    that same bin; the estimator applies that restriction separately.

    Attributes
    ----------
    model : ProbModel or None
        Classifier of true versus resampled pairs on :func:`pair_features`;
        ``None`` means the ratio is identically one.
    bin_freq : ndarray of shape (bins + 1,)
        Target training frequency of each bin.
    fallback_bins : frozenset
        Bins that had fewer than two training rows; the ratio is one there.
    """

    model: ProbModel | None
    subset: FeatureSubset
    complement: tuple[int, ...]
    bins: int
    bin_freq: np.ndarray
    fallback_bins: frozenset = frozenset()
    clip: float = DEFAULT_CLIP

    def __call__(self, xs, u, codes) -> np.ndarray:
        codes = np.asarray(codes, dtype=np.int64)
        if self.model is None:
            return np.ones(codes.shape[0])
        Z = pair_features(xs, u, bin_feature(codes, self.bins))
        out = _odds(self.model.predict(Z), self.clip)
        if self.fallback_bins:
            out[np.isin(codes, list(self.fallback_bins))] = 1.0
        return out

    def to_dict(self) -> dict:
        return {
            "subset": self.subset.name,
            "columns": list(self.subset.column_indices),
            "bins": self.bins,
            "bin_freq": [float(v) for v in self.bin_freq],
            "fallback_bins": sorted(int(b) for b in self.fallback_bins),
            "clip": self.clip,
            "model": None if self.model is None else self.model.to_dict(),
        }


def pair_features(xs, u, b) -> np.ndarray:
    """Classifier inputs for the conditional density ratio.

    The log ratio of ``p(u | x_s, bin)`` to ``p(u | bin)`` is a function of
    how ``u`` and ``x_s`` vary together, which an additive learner cannot
    express from the raw columns. Alongside ``(x_s, u, b)`` the inputs carry
    every product ``x_s_j * u_k``, the squares ``u_k ** 2`` and the products
    of both with the bin feature ``b``, so a logistic fit is exact for
    Gaussian features and for binary features with a bin-dependent coupling.
    """
    xs = np.asarray(xs, dtype=float).reshape(len(b), -1)
    u = np.asarray(u, dtype=float).reshape(len(b), -1)
    b = np.asarray(b, dtype=float)[:, None]
    cross = (xs[:, :, None] * u[:, None, :]).reshape(len(b), -1)
    inter = np.hstack([cross, u ** 2])
    return np.hstack([xs, u, b, inter, inter * b])


def hybrid_rows(X_s_rows, X_c_rows, s_cols, c_cols, d) -> np.ndarray:
    """Rows whose ``s`` columns come from one array and the rest from another."""
    H = np.empty((X_s_rows.shape[0], d))
    H[:, list(s_cols)] = X_s_rows[:, list(s_cols)]
    H[:, list(c_cols)] = X_c_rows[:, list(c_cols)]
    return H


def fit_vstat_density_ratio(
    train_target: Dataset,
    s: FeatureSubset,
    outcome: OutcomeModels,
    cfg: CvConfig = CvConfig(),
    clip: float = DEFAULT_CLIP,
    negatives: int = 3,
    seed: int = 0,
) -> VStatRatio:
    """Contrastive estimate of the conditional density ratio for a subset.

    Each target training row ``i`` contributes its true pair
    ``(x_s_i, x_{-s}_i, bin_i)`` as a positive and ``negatives`` pairs
    ``(x_s_i, x_{-s}_j, bin_i)`` with ``j`` drawn uniformly from the other rows
    in the same bin. Negatives whose hybrid row leaves the bin are discarded,
    and the kept ones are weighted by ``#positives / #negatives drawn`` so the
    classifier odds estimate the ratio on the set where it is defined.
    """
    d = train_target.d
    s.check(d)
    B = outcome.bins
    X = train_target.features
    codes = outcome.bin_codes(X)
    counts = np.bincount(codes, minlength=B + 1)
    freq = counts / codes.size
    complement = tuple(j for j in range(d) if j not in s.column_indices)
    if not complement:
        return VStatRatio(None, s, complement, B, freq, frozenset(), clip)
    small = frozenset(int(b) for b in np.flatnonzero((counts > 0) & (counts < 2)))
    if small:
        warnings.warn(f"outcome bins {sorted(small)} have fewer than 2 target rows; "
                      "their conditional density ratio is set to 1")
    rng = np.random.default_rng(seed)
    s_cols = list(s.column_indices)
    c_cols = list(complement)
    rows_i, rows_j = [], []
    for b in np.flatnonzero(counts >= 2):
        members = np.flatnonzero(codes == b)
        m = members.size
        for _ in range(negatives):
            # Draw a partner from the other m - 1 rows of the bin.
            pos = rng.integers(0, m - 1, size=m)
            pos = pos + (pos >= np.arange(m))
            rows_i.append(members)
            rows_j.append(members[pos])
    rows_i = np.concatenate(rows_i) if rows_i else np.empty(0, np.int64)
    rows_j = np.concatenate(rows_j) if rows_j else np.empty(0, np.int64)
    n_drawn = rows_i.size
    hyb = hybrid_rows(X[rows_i], X[rows_j], s_cols, c_cols, d)
    keep = outcome.bin_codes(hyb) == codes[rows_i]
    rows_i, rows_j = rows_i[keep], rows_j[keep]
    pos_rows = np.flatnonzero(~np.isin(codes, list(small)))
    if rows_i.size < cfg.folds:
        warnings.warn(f"subset {s.name!r}: too few in-bin resampled pairs; "
                      "conditional density ratio set to 1")
        return VStatRatio(None, s, complement, B, freq, small, clip)
    Z_pos = pair_features(X[pos_rows][:, s_cols], X[pos_rows][:, c_cols],
                          bin_feature(codes[pos_rows], B))
    Z_neg = pair_features(X[rows_i][:, s_cols], X[rows_j][:, c_cols],
                          bin_feature(codes[rows_i], B))
    Z = np.vstack([Z_pos, Z_neg])
    lab = np.concatenate([np.ones(pos_rows.size), np.zeros(rows_i.size)])
    n_pos_eligible = int(np.sum(counts[counts >= 2]))
    w = np.concatenate([np.ones(pos_rows.size),
                        np.full(rows_i.size, n_pos_eligible / max(n_drawn, 1))])
    try:
        model = fit_prob_classifier(Z, lab, cfg, sample_weight=w)
    except (InsufficientDataError, DegenerateLabelError) as exc:
        warnings.warn(f"subset {s.name!r}: conditional density ratio set to 1 ({exc})")
        model = None
    return VStatRatio(model, s, complement, B, freq, small, clip)


# ---------------------------------------------------------------------------
# Scaled ratios


@dataclass(frozen=True, eq=False)
class ScaledRatio:
    """A density ratio multiplied by a positive constant tied to a detector."""

    base_ratio: Callable
    scale: float
    detector: Callable

    def __call__(self, X) -> np.ndarray:
        return self.base_ratio(X) * self.scale


def shifted_prevalence(ratio_s: Callable, detector: Callable, eval_source: Dataset) -> float:
    """Detector prevalence under the subset-shifted distribution.

    Self-normalized importance weighting over source rows:
    ``mean(pi_s * h) / mean(pi_s)``.
    """
    X = eval_source.features
    r = ratio_s(X)
    return float(np.mean(r * detector(X)) / np.mean(r))


def scale_ratio(
    ratio: Callable,
    detector: Callable,
    eval_source: Dataset,
    eval_target: Dataset | None = None,
    shifted: bool = False,
) -> ScaledRatio:
    """Scale a ratio by the detector's source prevalence over its comparison prevalence.

    With ``shifted=False`` the comparison is the target prevalence, measured
    on ``eval_target``. With ``shifted=True`` the ratio is a subset ratio and
    the comparison is the prevalence under the subset-shifted distribution,
    from :func:`shifted_prevalence`.

    Raises
    ------
    DegenerateDetectorError
        A prevalence is zero.
    """
    e0 = float(np.mean(detector(eval_source.features)))
    if shifted:
        e1 = shifted_prevalence(ratio, detector, eval_source)
    else:
        if eval_target is None:
            raise ValueError("eval_target is required unless shifted=True")
        e1 = float(np.mean(detector(eval_target.features)))
    if e0 <= 0 or e1 <= 0:
        raise DegenerateDetectorError("detector has zero prevalence; cannot scale the ratio")
    return ScaledRatio(ratio, e0 / e1, detector)


# ---------------------------------------------------------------------------
# Collected nuisances


@dataclass(eq=False)
class NuisanceSet:
    """Everything fitted on the training partitions for one hierarchical run.

    ``outcome`` and ``ratio`` serve the outcome tests on all features.
    ``covariate_columns``, ``covariate_z0`` and ``covariate_ratio`` serve the
    covariate tests, restricted to loss-associated features. The per-subset
    maps are filled lazily by the detailed tests.
    """

    outcome: OutcomeModels
    ratio: DensityRatio
    covariate_columns: tuple[int, ...]
    covariate_z0: Callable | None
    covariate_ratio: DensityRatio | None
    bins: int = DEFAULT_BINS
    clip: float = DEFAULT_CLIP
    shifted: dict = field(default_factory=dict)
    vstat_ratio: dict = field(default_factory=dict)
    subset_ratio: dict = field(default_factory=dict)
    subset_loss: dict = field(default_factory=dict)
    conditional_loss: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def dump(obj):
            return obj.to_dict() if hasattr(obj, "to_dict") else "analytic"

        def dump_map(m: Mapping):
            return {k: dump(v) for k, v in sorted(m.items())}

        return {
            "format": "shiftdiag.nuisance",
            "version": 1,
            "bins": self.bins,
            "clip": self.clip,
            "outcome": self.outcome.to_dict(),
            "ratio": self.ratio.to_dict(),
            "covariate_columns": list(self.covariate_columns),
            "covariate_z0": None if self.covariate_z0 is None else dump(self.covariate_z0),
            "covariate_ratio": None if self.covariate_ratio is None else self.covariate_ratio.to_dict(),
            "shifted": dump_map(self.shifted),
            "vstat_ratio": dump_map(self.vstat_ratio),
            "subset_ratio": dump_map(self.subset_ratio),
            "subset_loss": dump_map(self.subset_loss),
            "conditional_loss": dump_map(self.conditional_loss),
        }
