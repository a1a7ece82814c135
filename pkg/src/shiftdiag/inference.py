"""Bootstrap p-values, the four tests and the two-stage orchestration.

Stage one runs the aggregate covariate and outcome tests. For each branch that
rejects, stage two tests every candidate feature subset; a subset is flagged
as a possible explanation when its test does *not* reject.
"""

from __future__ import annotations

import math
import traceback
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig, derive_seed
from .data import Dataset, FeatureSubset, SplitPair, compute_loss, filter_loss_correlated, split
from .detectors import (
    PREVALENCE_OK,
    Detector,
    default_grid,
    enforce_prevalence,
    fit_agg_covariate_detector,
    fit_agg_outcome_detector,
    fit_detailed_covariate_detector,
    fit_detailed_outcome_detector,
    fit_regression_outcome_detector,
)
from .errors import DegenerateDetectorError, ShiftDiagError, ValidationError
from .estimators import (
    MceeResult,
    OutcomeShiftParts,
    mcee_agg_covariate,
    mcee_agg_outcome,
    mcee_detailed_covariate,
    mcee_detailed_outcome,
)
from .explain import RuleSet, SubgroupStats, subgroup_stats, summarize_subgroup
from .learners import CvConfig, fit_prob_classifier
from .nuisance import (
    NuisanceSet,
    fit_covariate_loss,
    fit_density_ratio,
    fit_detector_weighted_loss,
    fit_outcome_models,
    fit_shifted_outcome,
    fit_vstat_density_ratio,
)

REPORT_FORMAT = "shiftdiag.report"
REPORT_FORMAT_VERSION = 1

H_COVARIATE = "H0_X"
H_OUTCOME = "H0_YX"
H_DETAIL_COVARIATE = "H0s_X"
H_DETAIL_OUTCOME = "H0s_YX"

_REPLICATE_BLOCK = 64


# ---------------------------------------------------------------------------
# Multiplier bootstrap


def multiplier_weights(seed: int, reps: int, n: int) -> np.ndarray:
    """Standard normal multipliers, one row per replicate.

    Row ``r`` is drawn from its own generator seeded with ``(seed, r)``, so any
    subset of replicates can be regenerated independently.
    """
    out = np.empty((reps, n))
    for r in range(reps):
        out[r] = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFF, r]).standard_normal(n)
    return out


@dataclass(frozen=True, eq=False)
class BootstrapDraws:
    """Replicate statistics of a multiplier bootstrap.

    The multiplier matrix is not stored; :meth:`weights` regenerates it.
    """

    reps: int
    seed: int
    n: int
    statistics: np.ndarray

    def weights(self) -> np.ndarray:
        return multiplier_weights(self.seed, self.reps, self.n)

    def p_value(self, estimate: float) -> float:
        return (1.0 + float(np.sum(self.statistics >= estimate))) / (self.reps + 1.0)


def bootstrap_statistics(influence: np.ndarray, reps: int, seed: int) -> np.ndarray:
    """``(1/n) * sum_i xi_i * (psi_i - mean(psi))`` for each replicate."""
    psi = np.asarray(influence, dtype=float)
    psi = psi - psi.mean()
    n = psi.size
    stats = np.empty(reps)
    for start in range(0, reps, _REPLICATE_BLOCK):
        stop = min(reps, start + _REPLICATE_BLOCK)
        xi = np.stack([np.random.default_rng([int(seed) & 0xFFFFFFFFFFFF, r]).standard_normal(n)
                       for r in range(start, stop)])
        stats[start:stop] = xi @ psi / n
    return stats


def multiplier_bootstrap_pvalue(mcee, reps: int = 1000, seed: int = 0):
    """One-sided bootstrap p-value for ``H0: McEE <= 0``.

    Parameters
    ----------
    mcee : MceeResult or tuple (estimate, influence)
    reps : int
        Number of replicates, at least 100.
    seed : int

    Returns
    -------
    p_value : float
        ``(1 + #{T*_r >= estimate}) / (reps + 1)``; 1 when every influence
        contribution is zero.
    draws : BootstrapDraws or None
        ``None`` in the all-zero case.
    """
    if reps < 100:
        raise ValidationError("at least 100 bootstrap replicates are required")
    if isinstance(mcee, MceeResult):
        estimate, psi = mcee.estimate, mcee.influence
    else:
        estimate, psi = mcee
    psi = np.asarray(psi, dtype=float)
    if not np.any(psi != 0):
        return 1.0, None
    draws = BootstrapDraws(reps, int(seed), psi.size, bootstrap_statistics(psi, reps, seed))
    return draws.p_value(float(estimate)), draws


# ---------------------------------------------------------------------------
# Results


@dataclass(eq=False)
class TestResult:
    """Outcome of one hypothesis test.

    ``rejected`` is true exactly when ``p_value <= alpha`` and the test is not
    degenerate. A degenerate test (no qualifying subgroup) has p-value 1. A
    test that failed with an error has p-value NaN and is neither rejected nor
    flagged.
    """

    __test__ = False  # not a pytest test class

    hypothesis: str
    p_value: float
    rejected: bool
    degenerate: bool
    subset: str | None = None
    mcee: MceeResult | None = None
    detector: Detector | None = None
    note: str = ""
    error: str | None = None
    subgroup_summary: RuleSet | None = None
    subgroup_stats: SubgroupStats | None = None
    bootstrap: BootstrapDraws | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "hypothesis": self.hypothesis,
            "subset": self.subset,
            "p_value": None if math.isnan(self.p_value) else float(self.p_value),
            "rejected": bool(self.rejected),
            "degenerate": bool(self.degenerate),
            "note": self.note,
            "error": self.error,
            "mcee": None if self.mcee is None else self.mcee.to_dict(),
            "detector": None if self.detector is None else self.detector.to_dict(),
            "subgroup_summary": None if self.subgroup_summary is None
            else self.subgroup_summary.to_dict(),
            "subgroup_stats": None if self.subgroup_stats is None
            else self.subgroup_stats.to_dict(),
        }


def _degenerate(hyp, subset, detector, note):
    return TestResult(hyp, 1.0, False, True, subset, None, detector, note)


def _failed(hyp, subset, exc):
    return TestResult(hyp, math.nan, False, False, subset, note="test failed",
                      error=f"{type(exc).__name__}: {exc}")


def _finish(hyp, subset, mcee, detector, config: RunConfig, seed):
    p, draws = multiplier_bootstrap_pvalue(mcee, config.bootstrap_reps, seed)
    if draws is None:
        return TestResult(hyp, 1.0, False, True, subset, mcee, detector,
                          "all influence contributions are zero")
    return TestResult(hyp, p, p <= config.alpha, False, subset, mcee, detector, bootstrap=draws)


def flag_set(results: dict, alpha: float) -> list[str]:
    """Subset names whose null is not rejected: ``{s : p_s > alpha}``."""
    return sorted(k for k, r in results.items() if r.p_value > alpha)


# ---------------------------------------------------------------------------
# Nuisance fitting


def cv_config(config: RunConfig, *keys) -> CvConfig:
    return CvConfig(folds=config.cv_folds, seed=derive_seed(config.seed, "cv", *keys) % (2**32))


def distill_model(train_source: Dataset, train_target: Dataset, config: RunConfig) -> Callable:
    """Surrogate for a model known only through its predictions.

    Fits a classifier of the model's hard labels on the pooled training rows,
    so the model can be evaluated at feature combinations that were never
    scored. If the model predicts a single label the surrogate is constant.
    """
    X = np.vstack([train_source.features, train_target.features])
    lab = np.concatenate([train_source.predictions, train_target.predictions]) >= 0.5
    if lab.min() == lab.max():
        value = float(lab[0])
        return lambda Z: np.full(np.asarray(Z).shape[0], value)
    clf = fit_prob_classifier(X, lab.astype(float), cv_config(config, "surrogate"))
    return clf.predict


def fit_nuisances(train_source: Dataset, train_target: Dataset, config: RunConfig,
                  model: Callable) -> NuisanceSet:
    """Fit the nuisances shared by the aggregate tests and the detailed tests."""
    outcome = fit_outcome_models(train_source, train_target, model,
                                 cv_config(config, "outcome"), config.bins)
    ratio = fit_density_ratio(train_source, train_target, None, cv_config(config, "ratio"),
                              config.clip)
    if config.loss_filter:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            corr = filter_loss_correlated(train_source, train_target, config.corr_alpha)
        cols = () if corr is None else tuple(corr.column_indices)
    else:
        cols = tuple(range(train_source.d))
    cov_z0 = cov_ratio = None
    if cols:
        cov_z0 = fit_covariate_loss(train_source, cols, outcome, cv_config(config, "cov_loss"))
        if cols == tuple(range(train_source.d)):
            cov_ratio = ratio
        else:
            cov_ratio = fit_density_ratio(train_source, train_target, cols,
                                          cv_config(config, "cov_ratio"), config.clip)
    return NuisanceSet(outcome, ratio, cols, cov_z0, cov_ratio, config.bins, config.clip)


# ---------------------------------------------------------------------------
# Tests


def _outcome_detector(nuis: NuisanceSet, lower, config, source: SplitPair, target: SplitPair,
                      kind, subset=None, keys=()):
    if config.outcome_detector == "regression":
        return fit_regression_outcome_detector(lower, config.tau, target.train,
                                               cv_config(config, "detector", *keys), kind,
                                               subset, source.train)
    if kind == "agg_outcome":
        return fit_agg_outcome_detector(lower, nuis.outcome.z1, config.tau, target.train,
                                        source.train)
    return fit_detailed_outcome_detector(nuis.outcome.z1, lower, config.tau, target.train,
                                         subset, source.train)


def aggregate_outcome_test(source: SplitPair, target: SplitPair, config: RunConfig,
                           nuis: NuisanceSet) -> TestResult:
    det = _outcome_detector(nuis, nuis.outcome.z0, config, source, target, "agg_outcome")
    if enforce_prevalence(det, source.eval, target.eval, config.epsilon) != PREVALENCE_OK:
        return _degenerate(H_OUTCOME, None, det, "no qualifying subgroup")
    mcee = mcee_agg_outcome(source.eval, target.eval, nuis.outcome.z0, nuis.ratio, det,
                            config.tau)
    return _finish(H_OUTCOME, None, mcee, det, config, derive_seed(config.seed, "boot", H_OUTCOME))


def _grid(nuis: NuisanceSet, source: SplitPair, config: RunConfig):
    return default_grid(nuis.covariate_z0(source.train.features), config.omega_grid_size,
                        config.lambda_grid_size)


def aggregate_covariate_test(source: SplitPair, target: SplitPair, config: RunConfig,
                             nuis: NuisanceSet) -> TestResult:
    if not nuis.covariate_columns:
        return _degenerate(H_COVARIATE, None, None, "no feature is associated with the loss")
    det = fit_agg_covariate_detector(nuis.covariate_z0, nuis.covariate_ratio, config.tau,
                                     _grid(nuis, source, config), source.train, target.train,
                                     config.epsilon)
    if enforce_prevalence(det, source.eval, target.eval, config.epsilon) != PREVALENCE_OK:
        return _degenerate(H_COVARIATE, None, det, "no qualifying subgroup")
    mcee = mcee_agg_covariate(source.eval, target.eval, nuis.covariate_z0, nuis.covariate_ratio,
                              det, config.tau)
    return _finish(H_COVARIATE, None, mcee, det, config,
                   derive_seed(config.seed, "boot", H_COVARIATE))


def detailed_outcome_test(source: SplitPair, target: SplitPair, s: FeatureSubset,
                          config: RunConfig, nuis: NuisanceSet) -> TestResult:
    shifted = nuis.shifted.get(s.name)
    if shifted is None:
        shifted = fit_shifted_outcome(target.train, s, nuis.outcome,
                                      cv_config(config, "shifted", s.name))
        nuis.shifted[s.name] = shifted
    vratio = nuis.vstat_ratio.get(s.name)
    if vratio is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            vratio = fit_vstat_density_ratio(target.train, s, nuis.outcome,
                                             cv_config(config, "vstat", s.name), config.clip,
                                             seed=derive_seed(config.seed, "pairs", s.name))
        nuis.vstat_ratio[s.name] = vratio
    det = _outcome_detector(nuis, shifted.zs, config, source, target, "detail_outcome", s,
                            (s.name,))
    if enforce_prevalence(det, source.eval, target.eval, config.epsilon) != PREVALENCE_OK:
        return _degenerate(H_DETAIL_OUTCOME, s.name, det, "no qualifying subgroup")
    mcee = mcee_detailed_outcome(target.eval, OutcomeShiftParts.from_nuisance(shifted, vratio),
                                 det, config.tau)
    return _finish(H_DETAIL_OUTCOME, s.name, mcee, det, config,
                   derive_seed(config.seed, "boot", H_DETAIL_OUTCOME, s.name))


def detailed_covariate_test(source: SplitPair, target: SplitPair, s: FeatureSubset,
                            config: RunConfig, nuis: NuisanceSet) -> TestResult:
    if not nuis.covariate_columns:
        return _degenerate(H_DETAIL_COVARIATE, s.name, None,
                           "no feature is associated with the loss")
    s_cols = tuple(c for c in s.column_indices if c in nuis.covariate_columns)
    ratio_s = nuis.subset_ratio.get(s.name)
    if ratio_s is None:
        if s_cols == tuple(nuis.covariate_columns):
            ratio_s = nuis.covariate_ratio
        else:
            ratio_s = fit_density_ratio(source.train, target.train, s_cols,
                                        cv_config(config, "subset_ratio", s.name), config.clip)
        nuis.subset_ratio[s.name] = ratio_s
    det = fit_detailed_covariate_detector(nuis.covariate_z0, nuis.covariate_ratio, ratio_s,
                                          config.tau, _grid(nuis, source, config), source.train,
                                          target.train, s, config.epsilon)
    if enforce_prevalence(det, source.eval, target.eval, config.epsilon) != PREVALENCE_OK:
        return _degenerate(H_DETAIL_COVARIATE, s.name, det, "no qualifying subgroup")
    zbar = fit_detector_weighted_loss(source.train, s_cols, det,
                                      cv_config(config, "zbar", s.name))
    nuis.subset_loss[s.name] = zbar
    mcee = mcee_detailed_covariate(source.eval, target.eval, nuis.covariate_z0,
                                   nuis.covariate_ratio, ratio_s, zbar, det, config.tau)
    return _finish(H_DETAIL_COVARIATE, s.name, mcee, det, config,
                   derive_seed(config.seed, "boot", H_DETAIL_COVARIATE, s.name))


def _guarded(fn, hyp, subset, *args):
    try:
        return fn(*args)
    except DegenerateDetectorError as exc:
        return _degenerate(hyp, subset, None, str(exc))
    except ShiftDiagError as exc:
        return _failed(hyp, subset, exc)
    except (ValueError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _failed(hyp, subset, exc)


def run_aggregate_tests(source: SplitPair, target: SplitPair, config: RunConfig,
                        model: Callable | None = None, nuisance: NuisanceSet | None = None):
    """Both aggregate tests on prepared splits.

    Returns
    -------
    covariate, outcome : TestResult
    nuisance : NuisanceSet
        The fitted nuisances, reusable by :func:`run_detailed_tests`.
    """
    if nuisance is None:
        if model is None:
            model = distill_model(source.train, target.train, config)
        nuisance = fit_nuisances(source.train, target.train, config, model)
    cov = _guarded(aggregate_covariate_test, H_COVARIATE, None, source, target, config, nuisance)
    out = _guarded(aggregate_outcome_test, H_OUTCOME, None, source, target, config, nuisance)
    return cov, out, nuisance


def run_detailed_tests(source: SplitPair, target: SplitPair, subsets: Sequence[FeatureSubset],
                       which: str, config: RunConfig, model: Callable | None = None,
                       nuisance: NuisanceSet | None = None):
    """One detailed test per subset for the ``"covariate"`` or ``"outcome"`` branch.

    Failures are isolated per subset. Returns the map from subset name to
    result and the flag set ``{s : p_s > alpha}``.
    """
    if which not in ("covariate", "outcome"):
        raise ValidationError("which must be 'covariate' or 'outcome'")
    if nuisance is None:
        if model is None:
            model = distill_model(source.train, target.train, config)
        nuisance = fit_nuisances(source.train, target.train, config, model)
    fn = detailed_covariate_test if which == "covariate" else detailed_outcome_test
    hyp = H_DETAIL_COVARIATE if which == "covariate" else H_DETAIL_OUTCOME
    results = {}
    for s in subsets:
        s.check(source.train.d)
        results[s.name] = _guarded(fn, hyp, s.name, source, target, s, config, nuisance)
    return results, flag_set(results, config.alpha)


# ---------------------------------------------------------------------------
# Orchestration


@dataclass(eq=False)
class HierarchicalReport:
    """Everything a hierarchical run produced."""

    config: RunConfig
    aggregate: dict
    detailed_covariate: dict
    detailed_outcome: dict
    flags: dict
    decomposition: dict
    column_names: tuple
    subsets: dict
    forced: bool = False
    errors: list = field(default_factory=list)
    n_rows: dict = field(default_factory=dict)
    nuisance: NuisanceSet | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "version": REPORT_FORMAT_VERSION,
            "config": self.config.to_dict(),
            "columns": list(self.column_names),
            "subsets": {k: list(v) for k, v in self.subsets.items()},
            "rows": dict(self.n_rows),
            "decomposition": dict(self.decomposition),
            "aggregate": {k: v.to_dict() for k, v in self.aggregate.items()},
            "detailed_covariate": {k: v.to_dict() for k, v in self.detailed_covariate.items()},
            "detailed_outcome": {k: v.to_dict() for k, v in self.detailed_outcome.items()},
            "flags": {k: list(v) for k, v in self.flags.items()},
            "bonferroni": self.bonferroni(),
            "forced_detailed": bool(self.forced),
            "errors": list(self.errors),
        }

    def bonferroni(self) -> dict:
        """Advisory Bonferroni-adjusted p-values within each detailed branch."""
        out = {}
        for branch, res in (("covariate", self.detailed_covariate),
                            ("outcome", self.detailed_outcome)):
            m = len(res)
            out[branch] = {k: (None if math.isnan(r.p_value) else min(1.0, r.p_value * m))
                           for k, r in res.items()}
        return out


def decomposition(eval_source: Dataset, eval_target: Dataset, z0: Callable) -> dict:
    """Plug-in split of the mean loss change into covariate and outcome parts.

    ``total = P1[loss] - P0[loss]``, ``covariate = P1[Z0] - P0[loss]`` and
    ``outcome = P1[loss] - P1[Z0]``, so the parts add up to the total.
    """
    m0 = math.fsum(eval_source.loss) / eval_source.n
    m1 = math.fsum(eval_target.loss) / eval_target.n
    z = math.fsum(z0(eval_target.features)) / eval_target.n
    return {"total": m1 - m0, "covariate": z - m0, "outcome": m1 - z,
            "source_loss": m0, "target_loss": m1}


def resolve_subsets(config: RunConfig, column_names: Sequence[str],
                    subsets: Sequence[FeatureSubset] | None = None) -> list[FeatureSubset]:
    if subsets is not None:
        return [s.check(len(column_names)) for s in subsets]
    if config.subsets:
        return [FeatureSubset.from_names(k, cols, column_names) for k, cols in config.subsets]
    return [FeatureSubset(c, (j,)) for j, c in enumerate(column_names)]


def prepare_splits(source_raw: Dataset, target_raw: Dataset, config: RunConfig):
    src = compute_loss(source_raw)
    tgt = compute_loss(target_raw)
    return (split(src, config.split_fraction, derive_seed(config.seed, "split", 0)),
            split(tgt, config.split_fraction, derive_seed(config.seed, "split", 1)))


def _explain(result: TestResult, source: SplitPair, target: SplitPair):
    if result.rejected and result.detector is not None:
        result.subgroup_summary = summarize_subgroup(result.detector, target.eval)
        result.subgroup_stats = subgroup_stats(result.detector, source.eval, target.eval)


def run_hierarchy(source_raw: Dataset, target_raw: Dataset,
                  subsets: Sequence[FeatureSubset] | None = None,
                  config: RunConfig = RunConfig(), model: Callable | None = None,
                  force_detailed: bool | None = None) -> HierarchicalReport:
    """Full two-stage run on raw datasets with predictions.

    Parameters
    ----------
    source_raw, target_raw : Dataset
        Rows with predictions; losses are recomputed here.
    subsets : list of FeatureSubset, optional
        Candidates for the detailed tests. Defaults to ``config.subsets`` or
        one subset per feature.
    model : callable, optional
        The frozen model as a function of the features. When omitted a
        surrogate is distilled from the stored predictions.
    force_detailed : bool, optional
        Run detailed tests regardless of the aggregate outcome; recorded in
        the report. Defaults to ``config.force_detailed``.
    """
    if source_raw.column_names != target_raw.column_names:
        raise ValidationError("source and target have different feature columns")
    force = config.force_detailed if force_detailed is None else force_detailed
    names = source_raw.column_names
    subset_list = resolve_subsets(config, names, subsets)
    source, target = prepare_splits(source_raw, target_raw, config)
    errors: list = []
    if model is None:
        model = distill_model(source.train, target.train, config)
    nuis = fit_nuisances(source.train, target.train, config, model)
    decomp = decomposition(source.eval, target.eval, nuis.outcome.z0)
    cov, out, _ = run_aggregate_tests(source, target, config, model, nuis)
    for r in (cov, out):
        if r.error:
            errors.append(f"{r.hypothesis}: {r.error}")
        try:
            _explain(r, source, target)
        except ShiftDiagError as exc:
            errors.append(f"{r.hypothesis} summary: {exc}")
    detailed = {"covariate": {}, "outcome": {}}
    flags = {"covariate": [], "outcome": []}
    for which, agg in (("covariate", cov), ("outcome", out)):
        if agg.rejected or force:
            try:
                res, fl = run_detailed_tests(source, target, subset_list, which, config, model,
                                             nuis)
            except ShiftDiagError as exc:
                errors.append(f"{which} detailed stage: {exc}\n{traceback.format_exc(limit=2)}")
                continue
            detailed[which], flags[which] = res, fl
            errors.extend(f"{r.hypothesis}[{k}]: {r.error}" for k, r in res.items() if r.error)
    return HierarchicalReport(
        config=config,
        aggregate={"covariate": cov, "outcome": out},
        detailed_covariate=detailed["covariate"],
        detailed_outcome=detailed["outcome"],
        flags=flags,
        decomposition=decomp,
        column_names=names,
        subsets={s.name: [names[j] for j in s.column_indices] for s in subset_list},
        forced=bool(force),
        errors=errors,
        n_rows={"source_train": source.train.n, "source_eval": source.eval.n,
                "target_train": target.train.n, "target_eval": target.eval.n},
        nuisance=nuis,
    )
