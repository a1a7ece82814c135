"""Subgroup detectors for the four tests.

Outcome detectors are plug-in indicators of a positive fitted exceedence.
Covariate detectors come from a grid search over the two constants that
index the optimal set for the covariate objective: a ratio level ``omega``
and a loss level ``lambda``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset, FeatureSubset
from .learners import CvConfig, fit_regressor

KINDS = ("agg_outcome", "detail_outcome", "agg_covariate", "detail_covariate")
PREVALENCE_OK = "ok"
PREVALENCE_DEGENERATE = "degenerate"

OMEGA_RANGE = (0.25, 4.0)
N_OMEGA = 17
N_LAMBDA = 21
CONSISTENCY_TOL = 0.25


@dataclass(frozen=True, eq=False)
class Detector:
    """Binary subgroup indicator with the metadata of how it was built.

    Calling the detector on a full feature matrix returns an int array of
    zeros and ones.

    Attributes
    ----------
    kind : str
        One of ``KINDS``.
    omega, lam : float or None
        Grid constants for covariate detectors.
    prevalence_source, prevalence_target : float
        Fraction of training rows flagged in each domain (NaN if not measured).
    feasible : bool
        False when a grid search found no admissible candidate; the predicate
        is then identically zero.
    """

    kind: str
    predicate: Callable[[np.ndarray], np.ndarray]
    omega: float | None = None
    lam: float | None = None
    subset: FeatureSubset | None = None
    prevalence_source: float = math.nan
    prevalence_target: float = math.nan
    tau: float = 0.0
    objective: float | None = None
    feasible: bool = True
    meta: dict = field(default_factory=dict)

    def __call__(self, X) -> np.ndarray:
        return np.asarray(self.predicate(np.asarray(X, dtype=float))).astype(np.int64)

    def to_dict(self) -> dict:
        def num(v):
            return None if v is None or (isinstance(v, float) and math.isnan(v)) else float(v)

        return {
            "kind": self.kind,
            "omega": num(self.omega),
            "lambda": num(self.lam),
            "subset": None if self.subset is None else {
                "name": self.subset.name, "columns": list(self.subset.column_indices)},
            "prevalence_source": num(self.prevalence_source),
            "prevalence_target": num(self.prevalence_target),
            "tau": float(self.tau),
            "objective": num(self.objective),
            "feasible": bool(self.feasible),
            "meta": dict(self.meta),
        }


def _zero_predicate(X):
    return np.zeros(np.asarray(X).shape[0], dtype=np.int64)


def _prevalence(det, data: Dataset | None) -> float:
    if data is None:
        return math.nan
    return float(np.mean(det(data.features)))


@dataclass(frozen=True, eq=False)
class _Exceedence:
    upper: Callable
    lower: Callable
    tau: float

    def __call__(self, X):
        return (self.upper(X) - self.lower(X) - self.tau > 0).astype(np.int64)


def _plugin(kind, upper, lower, tau, train_target, train_source, subset=None, meta=None):
    pred = _Exceedence(upper, lower, float(tau))
    det = Detector(kind, pred, subset=subset, tau=float(tau), meta=meta or {})
    return Detector(
        kind, pred, subset=subset, tau=float(tau), meta=meta or {},
        prevalence_source=_prevalence(det, train_source),
        prevalence_target=_prevalence(det, train_target),
    )


def fit_agg_outcome_detector(z0, z1, tau: float, train_target: Dataset,
                             train_source: Dataset | None = None) -> Detector:
    """Indicator of ``Z1(x) - Z0(x) - tau > 0``."""
    return _plugin("agg_outcome", z1, z0, tau, train_target, train_source,
                   meta={"strategy": "plugin"})


def fit_detailed_outcome_detector(z1, zs, tau: float, train_target: Dataset,
                                  subset: FeatureSubset | None = None,
                                  train_source: Dataset | None = None) -> Detector:
    """Indicator of ``Z1(x) - Zs(x) - tau > 0``."""
    return _plugin("detail_outcome", z1, zs, tau, train_target, train_source, subset,
                   meta={"strategy": "plugin"})


@dataclass(frozen=True, eq=False)
class _RegressionRule:
    model: Callable
    tau: float

    def __call__(self, X):
        return (self.model(X) - self.tau > 0).astype(np.int64)


def fit_regression_outcome_detector(lower, tau: float, train_target: Dataset,
                                    cfg: CvConfig = CvConfig(), kind: str = "agg_outcome",
                                    subset: FeatureSubset | None = None,
                                    train_source: Dataset | None = None) -> Detector:
    """Alternative outcome detector: regress ``loss - lower(x)`` on target features.

    The detector flags rows whose fitted residual exceeds ``tau``. It is
    selected with ``outcome_detector = "regression"`` in the run configuration.
    """
    X = train_target.features
    model = fit_regressor(X, train_target.loss - lower(X), cfg)
    pred = _RegressionRule(model.predict, float(tau))
    det = Detector(kind, pred, subset=subset, tau=float(tau))
    return Detector(kind, pred, subset=subset, tau=float(tau),
                    prevalence_source=_prevalence(det, train_source),
                    prevalence_target=_prevalence(det, train_target),
                    meta={"strategy": "regression"})


# ---------------------------------------------------------------------------
# Covariate grid search


@dataclass(frozen=True)
class GridSpec:
    """Grid of ``omega`` (ratio level) and ``lambda`` (loss level) values."""

    omega: tuple[float, ...]
    lam: tuple[float, ...]

    def __post_init__(self):
        if not self.omega or not self.lam:
            raise ValueError("grid axes must be nonempty")
        if any(o <= 0 for o in self.omega):
            raise ValueError("omega values must be positive")
        if list(self.omega) != sorted(self.omega) or list(self.lam) != sorted(self.lam):
            raise ValueError("grid axes must be ascending")


def default_grid(z0_train, n_omega: int = N_OMEGA, n_lambda: int = N_LAMBDA) -> GridSpec:
    """Log-spaced ``omega`` on [0.25, 4] and ``lambda`` at quantiles of ``z0_train``."""
    omega = np.geomspace(OMEGA_RANGE[0], OMEGA_RANGE[1], n_omega)
    lam = np.unique(np.quantile(np.asarray(z0_train, float), np.linspace(0, 1, n_lambda)))
    return GridSpec(tuple(float(o) for o in omega), tuple(float(v) for v in lam))


@dataclass(frozen=True, eq=False)
class _LagrangeSet:
    z0: Callable
    ratio: Callable
    ratio_s: Callable | None
    omega: float
    lam: float
    tau: float

    def __call__(self, X):
        z = self.z0(X)
        r = self.ratio(X)
        if self.ratio_s is None:
            return ((z - self.lam) * (r * self.omega - 1.0) >= self.tau).astype(np.int64)
        rs = self.ratio_s(X)
        return ((z - self.lam) * (r * self.omega - rs) >= self.tau * rs).astype(np.int64)


def _grid_search(kind, z0, ratio, ratio_s, tau, grid, train_source, train_target,
                 epsilon, tol, subset):
    Xs, Xt = train_source.features, train_target.features
    z_s, r_s = z0(Xs), ratio(Xs)
    z_t, r_t = z0(Xt), ratio(Xt)
    if ratio_s is None:
        rs_s, rs_t = np.ones_like(r_s), np.ones_like(r_t)
    else:
        rs_s, rs_t = ratio_s(Xs), ratio_s(Xt)
    best = None
    n_feasible = 0
    lam = np.asarray(grid.lam)
    for oi, omega in enumerate(grid.omega):
        a_s = r_s * omega - rs_s
        a_t = r_t * omega - rs_t
        gain_s = z_s * a_s - tau * rs_s
        for li, lv in enumerate(lam):
            h_s = (z_s - lv) * a_s >= tau * rs_s
            h_t = (z_t - lv) * a_t >= tau * rs_t
            p_s = float(h_s.mean())
            p_t = float(h_t.mean())
            if p_s < epsilon or p_t < epsilon:
                continue
            if ratio_s is None:
                ref = p_s
            else:
                ref = float(np.mean(rs_s * h_s) / np.mean(rs_s))
            if abs(omega - ref / p_t) > tol * omega:
                continue
            n_feasible += 1
            obj = float(np.mean(gain_s * h_s))
            key = (obj, -p_t)
            if best is None or key > best[0]:
                best = (key, oi, li, p_s, p_t)
    meta = {"strategy": "grid", "n_feasible": n_feasible,
            "grid_size": [len(grid.omega), len(grid.lam)]}
    if best is None:
        return Detector(kind, _zero_predicate, subset=subset, tau=float(tau),
                        prevalence_source=0.0, prevalence_target=0.0,
                        feasible=False, meta=meta)
    (obj, _), oi, li, p_s, p_t = best
    omega, lv = float(grid.omega[oi]), float(lam[li])
    pred = _LagrangeSet(z0, ratio, ratio_s, omega, lv, float(tau))
    return Detector(kind, pred, omega=omega, lam=lv, subset=subset,
                    prevalence_source=p_s, prevalence_target=p_t, tau=float(tau),
                    objective=obj, meta=meta)


def fit_agg_covariate_detector(z0, ratio, tau: float, grid: GridSpec | None,
                               train_source: Dataset, train_target: Dataset,
                               epsilon: float = 0.05, tol: float = CONSISTENCY_TOL) -> Detector:
    """Grid search over sets ``{(Z0 - lambda) * (ratio * omega - 1) >= tau}``.

    A candidate is admissible when it flags at least ``epsilon`` of the
    training rows in both domains and ``omega`` is within ``tol * omega`` of
    the candidate's source-to-target prevalence ratio. Among admissible
    candidates the one with the largest source average of
    ``(Z0 * (ratio * omega - 1) - tau) * h`` wins; ties go to the smaller target
    prevalence and then to grid order. With no admissible candidate the
    returned detector is identically zero and ``feasible`` is False.
    """
    if grid is None:
        grid = default_grid(z0(train_source.features))
    return _grid_search("agg_covariate", z0, ratio, None, tau, grid, train_source,
                        train_target, epsilon, tol, None)


def fit_detailed_covariate_detector(z0, ratio, ratio_s, tau: float, grid: GridSpec | None,
                                    train_source: Dataset, train_target: Dataset,
                                    subset: FeatureSubset | None = None,
                                    epsilon: float = 0.05,
                                    tol: float = CONSISTENCY_TOL) -> Detector:
    """Grid search over ``{(Z0 - lambda) * (ratio * omega - ratio_s) >= tau * ratio_s}``.

    The objective is the source average of
    ``(Z0 * (ratio * omega - ratio_s) - tau * ratio_s) * h`` and ``omega`` must
    match the ratio of the subset-shifted prevalence (importance weighted on
    source rows) to the target prevalence.
    """
    if grid is None:
        grid = default_grid(z0(train_source.features))
    return _grid_search("detail_covariate", z0, ratio, ratio_s, tau, grid, train_source,
                        train_target, epsilon, tol, subset)


def enforce_prevalence(detector: Callable, eval_source: Dataset, eval_target: Dataset,
                       epsilon: float) -> str:
    """``"ok"`` when the detector flags at least ``epsilon`` of each eval set."""
    if getattr(detector, "feasible", True) is False:
        return PREVALENCE_DEGENERATE
    p0 = float(np.mean(detector(eval_source.features)))
    p1 = float(np.mean(detector(eval_target.features)))
    return PREVALENCE_OK if (p0 >= epsilon and p1 >= epsilon) else PREVALENCE_DEGENERATE
