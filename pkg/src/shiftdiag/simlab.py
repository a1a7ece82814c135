"""Synthetic setups, power studies and an exact oracle on finite supports.

Gaussian setups
---------------
Features are independent normals with per-domain means and standard
deviations; outcomes are Bernoulli with a linear logit. The presets are:

``setup_1a``
    Ten features. The target logit changes its ``x1`` coefficient from 0.8 to
    0.2 on ``A = {|x1| > 3.5}``.
``setup_1b``
    Ten features, same logit in both domains. The mean of ``x1`` is 1 in the
    source and 0 in the target. The reference subgroup for recovery is
    ``A = {|x1| > 4}``.
``setup_2``
    Four features with a pure outcome shift driven mostly by ``x1``.
``setup_3``
    Four features with a pure covariate shift driven mostly by ``x1``.
``null_variant``
    The source of ``setup_2`` in both domains.

Standard deviations are 2 wherever the setups list a diagonal entry of 2.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.special import expit

from .config import RunConfig, derive_seed
from .data import SOURCE, TARGET, Dataset, FeatureSubset, compute_loss, split
from .errors import NotApplicableError, SupportTooLargeError, ValidationError
from .estimators import OutcomeShiftParts
from .inference import (
    H_COVARIATE,
    H_DETAIL_COVARIATE,
    H_DETAIL_OUTCOME,
    H_OUTCOME,
    fit_nuisances,
    run_aggregate_tests,
    run_detailed_tests,
)
from .learners import ProbModel, fit_logistic
from .nuisance import bin_code, conditional_zero_one_loss
from .report import json_ready

SETUP_IDS = ("setup_1a", "setup_1b", "setup_2", "setup_3", "null_variant")
_ALIASES = {"1a": "setup_1a", "1b": "setup_1b", "2": "setup_2", "3": "setup_3",
            "null": "null_variant"}


@dataclass(frozen=True)
class SimSetupSpec:
    """Parameters of a Gaussian setup.

    Attributes
    ----------
    mean0, sd0, mean1, sd1 : tuple of float
        Per-feature means and standard deviations in each domain.
    phi0, phi1 : tuple of float
        Logit coefficients. For ``subgroup_mode == "outcome"`` the target uses
        ``phi1`` inside the subgroup and ``phi0`` elsewhere.
    subgroup_mode : {None, "outcome", "covariate"}
        Kind of shift the reference subgroup is meant to reveal. With
        ``"outcome"`` the logit change is confined to the subgroup.
    subgroup_feature, subgroup_threshold :
        The subgroup is ``{|x[feature]| > threshold}``.
    n : int
        Rows per domain.
    """

    id: str
    mean0: tuple
    sd0: tuple
    mean1: tuple
    sd1: tuple
    phi0: tuple
    phi1: tuple
    subgroup_mode: str | None = None
    subgroup_feature: int = 0
    subgroup_threshold: float = math.inf
    n: int = 8000
    split_fraction: float = 0.5
    n_model: int = 10000
    tau: float = 0.0
    epsilon: float = 0.05

    def __post_init__(self):
        d = len(self.mean0)
        for name in ("sd0", "mean1", "sd1", "phi0", "phi1"):
            if len(getattr(self, name)) != d:
                raise ValidationError(f"{name} has length {len(getattr(self, name))}, expected {d}")
        if min(self.sd0) <= 0 or min(self.sd1) <= 0:
            raise ValidationError("standard deviations must be positive")
        if self.subgroup_mode not in (None, "outcome", "covariate"):
            raise ValidationError(f"unknown subgroup mode {self.subgroup_mode!r}")

    @property
    def d(self) -> int:
        return len(self.mean0)

    @property
    def column_names(self) -> tuple[str, ...]:
        return tuple(f"x{j + 1}" for j in range(self.d))

    def in_subgroup(self, X) -> np.ndarray:
        if self.subgroup_mode is None:
            raise NotApplicableError(f"{self.id} has no planted subgroup")
        return np.abs(np.asarray(X)[:, self.subgroup_feature]) > self.subgroup_threshold

    def run_config(self, **kw) -> RunConfig:
        base = dict(tau=self.tau, epsilon=self.epsilon, split_fraction=self.split_fraction)
        base.update(kw)
        return RunConfig(**base)

    def scaled(self, factor: float) -> "SimSetupSpec":
        return replace(self, n=max(100, int(round(self.n * factor))))


def setup_spec(setup_id: str, fast: bool = False) -> SimSetupSpec:
    """Preset parameters; ``fast`` quarters the sample sizes."""
    sid = _ALIASES.get(setup_id, setup_id)
    phi_1 = (0.8, 0.5, 1.0) + (0.1,) * 7
    if sid == "setup_1a":
        spec = SimSetupSpec(sid, (0.0,) * 10, (2.0,) * 10, (0.0,) * 10, (2.0,) * 10, phi_1,
                            (0.2,) + phi_1[1:], "outcome", 0, 3.5, n=2000, split_fraction=0.2)
    elif sid == "setup_1b":
        spec = SimSetupSpec(sid, (1.0,) + (0.0,) * 9, (2.0,) * 10, (0.0,) * 10, (2.0,) * 10,
                            phi_1, phi_1, "covariate", 0, 4.0, n=2000, split_fraction=0.2)
    elif sid == "setup_2":
        spec = SimSetupSpec(sid, (0.0,) * 4, (2.0,) * 4, (0.0,) * 4, (2.0,) * 4,
                            (0.8, 0.5, 1.0, 0.6), (0.2, 0.4, 1.0, 0.6), tau=0.05)
    elif sid == "setup_3":
        phi = (2.5, 1.0, 0.5, 0.1)
        spec = SimSetupSpec(sid, (1.0, 0.0, 0.0, 1.0), (2.0,) * 4, (0.0,) * 4,
                            (1.0, 2.0, 2.0, 2.0), phi, phi, tau=0.02)
    elif sid == "null_variant":
        phi = (0.8, 0.5, 1.0, 0.6)
        spec = SimSetupSpec(sid, (0.0,) * 4, (2.0,) * 4, (0.0,) * 4, (2.0,) * 4, phi, phi)
    else:
        raise ValidationError(f"unknown setup {setup_id!r}; choose from {SETUP_IDS}")
    return spec.scaled(0.25) if fast else spec


def draw_features(spec: SimSetupSpec, domain: int, n: int, rng) -> np.ndarray:
    """Feature draws for one domain."""
    if domain == SOURCE:
        return rng.normal(spec.mean0, spec.sd0, size=(n, spec.d))
    return rng.normal(spec.mean1, spec.sd1, size=(n, spec.d))


def outcome_logit(spec: SimSetupSpec, domain: int, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    base = X @ np.asarray(spec.phi0)
    if domain == SOURCE:
        return base
    alt = X @ np.asarray(spec.phi1)
    if spec.subgroup_mode == "outcome":
        return np.where(spec.in_subgroup(X), alt, base)
    return alt


def draw_domain(spec: SimSetupSpec, domain: int, n: int, rng) -> Dataset:
    X = draw_features(spec, domain, n, rng)
    y = (rng.random(n) < expit(outcome_logit(spec, domain, X))).astype(np.int64)
    return Dataset(X, y, domain, None, None, spec.column_names)


def generate_setup(spec: SimSetupSpec, seed: int) -> tuple[Dataset, Dataset]:
    """Source and target draws of ``spec.n`` rows each, without predictions."""
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 11])
    return draw_domain(spec, SOURCE, spec.n, rng), draw_domain(spec, TARGET, spec.n, rng)


def train_study_model(spec: SimSetupSpec, n_train: int | None = None, seed: int = 0) -> ProbModel:
    """Logistic regression fitted on fresh source draws; the frozen model under audit."""
    n_train = spec.n_model if n_train is None else int(n_train)
    if n_train < 100:
        raise ValidationError("the study model needs at least 100 training rows")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 23])
    ds = draw_domain(spec, SOURCE, n_train, rng)
    if ds.outcome.min() == ds.outcome.max():
        return ProbModel("linear", _constant_linear(spec.d, float(ds.outcome[0])), spec.d, {})
    return fit_logistic(ds.features, ds.outcome, ridge=1e-6)


def _constant_linear(d, p):
    from .learners import LinearParams

    p = min(max(p, 1e-6), 1 - 1e-6)
    return LinearParams(math.log(p / (1 - p)), np.zeros(d))


def attach_predictions(ds: Dataset, model: Callable) -> Dataset:
    """Dataset with the model's scores as predictions and zero-one losses."""
    return compute_loss(replace(ds, predictions=np.asarray(model(ds.features), dtype=float)))


def true_subgroup_overlap(detector: Callable, spec: SimSetupSpec, n_eval: int = 20000,
                          seed: int = 0, metric: str = "accuracy") -> float:
    """Agreement of ``detector`` with the planted subgroup on fresh target draws.

    ``metric="accuracy"`` is the fraction of rows where the detector and the
    subgroup indicator agree. ``metric="recall"`` is the fraction of subgroup
    rows the detector flags.
    """
    if spec.subgroup_mode is None:
        raise NotApplicableError(f"{spec.id} has no planted subgroup")
    if metric not in ("accuracy", "recall"):
        raise ValidationError(f"unknown overlap metric {metric!r}")
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 31])
    X = draw_features(spec, TARGET, n_eval, rng)
    flagged = np.asarray(detector(X)).astype(bool)
    truth = spec.in_subgroup(X)
    if metric == "recall":
        return float(flagged[truth].mean()) if truth.any() else math.nan
    return float(np.mean(flagged == truth))


# ---------------------------------------------------------------------------
# Power studies


def binomial_ci(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Clopper-Pearson interval for a binomial proportion."""
    if n == 0:
        return (0.0, 1.0)
    ci = stats.binomtest(int(k), int(n)).proportion_ci(level, method="exact")
    return float(ci.low), float(ci.high)


@dataclass
class StudyRun:
    """Per-replicate results of a simulation study.

    ``records`` holds one dict per successful replicate with p-values keyed
    by hypothesis (``"H0_X"``, ``"H0_YX"``, ``"H0s_YX[X1]"``, ...) and, for
    setups with a planted subgroup, detector overlaps. Failed replicates are
    listed in ``failures`` and excluded from rates.
    """

    setup: SimSetupSpec
    reps: int
    config: RunConfig
    seed: int
    records: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    seconds: float = 0.0

    def p_values(self, key: str) -> np.ndarray:
        return np.array([r["p"][key] for r in self.records if key in r["p"]], dtype=float)

    def rejections(self, key: str) -> int:
        return int(np.sum(self.p_values(key) <= self.config.alpha))

    def rejection_rate(self, key: str) -> tuple[float, float, float]:
        """Rate with a 95% Clopper-Pearson interval."""
        p = self.p_values(key)
        k = int(np.sum(p <= self.config.alpha))
        lo, hi = binomial_ci(k, p.size)
        return (k / p.size if p.size else math.nan), lo, hi

    def median_p(self, key: str) -> float:
        p = self.p_values(key)
        return float(np.median(p)) if p.size else math.nan

    def median_flags(self, branch: str) -> list[str]:
        """Subsets whose median detailed p-value exceeds alpha."""
        hyp = H_DETAIL_COVARIATE if branch == "covariate" else H_DETAIL_OUTCOME
        names = sorted({k[len(hyp) + 1:-1] for r in self.records for k in r["p"]
                        if k.startswith(hyp + "[")})
        return [s for s in names if self.median_p(f"{hyp}[{s}]") > self.config.alpha]

    def overlaps(self, key: str) -> np.ndarray:
        return np.array([r["overlap"][key] for r in self.records
                         if key in r.get("overlap", {})], dtype=float)

    @property
    def keys(self) -> list[str]:
        return sorted({k for r in self.records for k in r["p"]})

    def to_dict(self) -> dict:
        summary = {}
        for k in self.keys:
            rate, lo, hi = self.rejection_rate(k)
            summary[k] = {"rejections": self.rejections(k), "reps": int(self.p_values(k).size),
                          "rate": rate, "ci95": [lo, hi], "median_p": self.median_p(k)}
        overlap = {}
        for k in sorted({k for r in self.records for k in r.get("overlap", {})}):
            o = self.overlaps(k)
            overlap[k] = {"median": float(np.median(o)), "mean": float(np.mean(o))}
        return {
            "format": "shiftdiag.study",
            "version": 1,
            "setup": {k: getattr(self.setup, k) for k in self.setup.__dataclass_fields__},
            "reps": self.reps,
            "seed": self.seed,
            "config": self.config.to_dict(),
            "summary": summary,
            "overlap": overlap,
            "failures": list(self.failures),
            "records": self.records,
        }

    def to_json(self) -> str:
        return json.dumps(json_ready(self.to_dict()), sort_keys=True, indent=1, allow_nan=False)

    def to_csv(self) -> str:
        keys = self.keys
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["rep", "seed"] + keys)
        for r in self.records:
            w.writerow([r["rep"], r["seed"]] + [repr(r["p"].get(k, math.nan)) for k in keys])
        return buf.getvalue()


def singleton_subsets(spec: SimSetupSpec) -> list[FeatureSubset]:
    return [FeatureSubset(f"X{j + 1}", (j,)) for j in range(spec.d)]


def run_replicate(spec: SimSetupSpec, config: RunConfig, seed: int,
                  detailed: Sequence[str] = (), subsets: Sequence[FeatureSubset] | None = None,
                  overlap_n: int = 20000) -> dict:
    """One replicate: fresh data and model, then the requested tests.

    Detailed branches listed in ``detailed`` run whether or not the aggregate
    test rejects, so their p-values are available for every replicate.
    """
    src_raw, tgt_raw = generate_setup(spec, seed)
    model = train_study_model(spec, spec.n_model, derive_seed(seed, "model"))
    src = attach_predictions(src_raw, model)
    tgt = attach_predictions(tgt_raw, model)
    cfg = config.updated(seed=int(seed) % (2**31))
    source = split(src, cfg.split_fraction, derive_seed(cfg.seed, "split", 0))
    target = split(tgt, cfg.split_fraction, derive_seed(cfg.seed, "split", 1))
    nuis = fit_nuisances(source.train, target.train, cfg, model.predict)
    cov, out, _ = run_aggregate_tests(source, target, cfg, model.predict, nuis)
    record = {"p": {H_COVARIATE: cov.p_value, H_OUTCOME: out.p_value},
              "degenerate": {H_COVARIATE: cov.degenerate, H_OUTCOME: out.degenerate},
              "estimate": {H_COVARIATE: None if cov.mcee is None else cov.mcee.estimate,
                           H_OUTCOME: None if out.mcee is None else out.mcee.estimate},
              "covariate_columns": list(nuis.covariate_columns),
              "overlap": {}}
    if spec.subgroup_mode is not None:
        for hyp, res in ((H_COVARIATE, cov), (H_OUTCOME, out)):
            if res.detector is not None:
                for metric in ("accuracy", "recall"):
                    key = hyp if metric == "accuracy" else f"{hyp}:recall"
                    record["overlap"][key] = true_subgroup_overlap(
                        res.detector, spec, overlap_n, derive_seed(seed, "overlap"), metric)
    subsets = singleton_subsets(spec) if subsets is None else subsets
    for which in detailed:
        res, _ = run_detailed_tests(source, target, subsets, which, cfg, model.predict, nuis)
        hyp = H_DETAIL_COVARIATE if which == "covariate" else H_DETAIL_OUTCOME
        for name, r in res.items():
            record["p"][f"{hyp}[{name}]"] = r.p_value
    return record


def run_power_study(spec: SimSetupSpec, reps: int, config: RunConfig | None = None,
                    seed: int = 0, detailed: Sequence[str] = (),
                    subsets: Sequence[FeatureSubset] | None = None,
                    overlap_n: int = 20000, progress: Callable | None = None) -> StudyRun:
    """Repeat :func:`run_replicate` over independent seeds.

    Replicate ``r`` uses seed ``derive_seed(seed, "rep", r)``, so results do
    not depend on the order in which replicates run.
    """
    if reps < 1:
        raise ValidationError("reps must be positive")
    config = spec.run_config() if config is None else config
    run = StudyRun(spec, reps, config, seed)
    t0 = time.perf_counter()
    for r in range(reps):
        rs = derive_seed(seed, "rep", r)
        try:
            rec = run_replicate(spec, config, rs, detailed, subsets, overlap_n)
        except Exception as exc:  # a failed replicate is recorded, not fatal
            run.failures.append({"rep": r, "seed": rs, "error": f"{type(exc).__name__}: {exc}"})
            continue
        rec["rep"], rec["seed"] = r, rs
        run.records.append(rec)
        if progress is not None:
            progress(r, rec)
    run.seconds = time.perf_counter() - t0
    return run


# ---------------------------------------------------------------------------
# Finite-support oracle


@dataclass(frozen=True, eq=False)
class DiscreteSpec:
    """Two distributions on a finite product grid with known outcome laws.

    Attributes
    ----------
    support : ndarray of shape (K, d)
        Support points; every combination of per-feature levels appears once,
        so rows recombined across features stay on the support.
    p0, p1 : ndarray of shape (K,)
        Point masses in each domain.
    mu0, mu1 : ndarray of shape (K,)
        P(Y = 1 | x) in each domain.
    pred : ndarray of shape (K,)
        Frozen model scores.
    """

    support: np.ndarray
    p0: np.ndarray
    p1: np.ndarray
    mu0: np.ndarray
    mu1: np.ndarray
    pred: np.ndarray
    bins: int = 40
    _index: dict = field(default=None, repr=False)

    def __post_init__(self):
        S = np.asarray(self.support, dtype=float)
        idx = {tuple(row): k for k, row in enumerate(S)}
        if len(idx) != S.shape[0]:
            raise ValidationError("support points must be distinct")
        for name in ("p0", "p1"):
            p = np.asarray(getattr(self, name), dtype=float)
            if np.any(p < 0) or abs(p.sum() - 1) > 1e-9:
                raise ValidationError(f"{name} must be a probability vector")
        object.__setattr__(self, "support", S)
        object.__setattr__(self, "_index", idx)

    @property
    def K(self) -> int:
        return self.support.shape[0]

    @property
    def d(self) -> int:
        return self.support.shape[1]

    @classmethod
    def random(cls, rng, levels: Sequence[int] = (2, 3, 3), mu0_values=(0.2, 0.5, 0.8),
               concentration: float = 2.0, bins: int = 40) -> "DiscreteSpec":
        """Random instance on the grid ``prod(range(levels))``.

        ``mu0`` takes few distinct values so that several support points share
        an outcome bin.
        """
        support = np.array(list(itertools.product(*[range(k) for k in levels])), dtype=float)
        K = support.shape[0]
        p0 = rng.dirichlet(np.full(K, concentration))
        p1 = rng.dirichlet(np.full(K, concentration))
        mu0 = rng.choice(np.asarray(mu0_values, dtype=float), size=K)
        mu1 = np.clip(mu0 + rng.uniform(-0.3, 0.3, size=K), 0.05, 0.95)
        pred = (rng.random(K) < 0.5).astype(float)
        return cls(support, p0, p1, mu0, mu1, pred, bins)

    # -- evaluation on feature rows ------------------------------------------

    def lookup(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        try:
            return np.fromiter((self._index[tuple(r)] for r in X), dtype=np.int64,
                               count=X.shape[0])
        except KeyError as exc:
            raise ValidationError(f"row {exc.args[0]} is not on the support") from None

    def model(self, X) -> np.ndarray:
        return self.pred[self.lookup(X)]

    def z(self, domain: int) -> np.ndarray:
        return conditional_zero_one_loss(self.pred, self.mu0 if domain == SOURCE else self.mu1)

    def codes(self) -> np.ndarray:
        return bin_code(self.mu0, self.bins)

    def sample(self, domain: int, n: int, rng) -> Dataset:
        p = self.p0 if domain == SOURCE else self.p1
        mu = self.mu0 if domain == SOURCE else self.mu1
        k = rng.choice(self.K, size=n, p=p)
        y = (rng.random(n) < mu[k]).astype(np.int64)
        ds = Dataset(self.support[k], y, domain, self.pred[k], None,
                     tuple(f"x{j + 1}" for j in range(self.d)))
        return compute_loss(ds)

    # -- exact nuisances -----------------------------------------------------

    def _marginal_keys(self, cols):
        cols = list(cols)
        keys = [tuple(r) for r in self.support[:, cols]] if cols else [()] * self.K
        groups: dict = {}
        for k, key in enumerate(keys):
            groups.setdefault(key, []).append(k)
        return keys, groups

    def subset_ratio_table(self, cols) -> np.ndarray:
        """``p1(x_s) / p0(x_s)`` at every support point."""
        keys, groups = self._marginal_keys(cols)
        m0 = {g: self.p0[m].sum() for g, m in groups.items()}
        m1 = {g: self.p1[m].sum() for g, m in groups.items()}
        return np.array([m1[k] / m0[k] if m0[k] > 0 else 0.0 for k in keys])

    def shifted_outcome_table(self, cols) -> np.ndarray:
        """Target P(Y=1 | x_s, bin) at every support point."""
        codes = self.codes()
        keys, _ = self._marginal_keys(cols)
        num: dict = {}
        den: dict = {}
        for k in range(self.K):
            g = (keys[k], int(codes[k]))
            num[g] = num.get(g, 0.0) + self.p1[k] * self.mu1[k]
            den[g] = den.get(g, 0.0) + self.p1[k]
        return np.array([num[(keys[k], int(codes[k]))] / den[(keys[k], int(codes[k]))]
                         if den[(keys[k], int(codes[k]))] > 0 else self.mu1[k]
                         for k in range(self.K)])

    def ratio(self, X) -> np.ndarray:
        return (self.p1 / self.p0)[self.lookup(X)]

    def subset_ratio(self, cols) -> Callable:
        table = self.subset_ratio_table(cols)
        return lambda X: table[self.lookup(X)]

    def z0(self, X) -> np.ndarray:
        return self.z(SOURCE)[self.lookup(X)]

    def zbar(self, cols, h: np.ndarray) -> Callable:
        """Source mean of ``loss * h`` given ``x_s``, for a subgroup table ``h``."""
        keys, groups = self._marginal_keys(cols)
        g = self.z(SOURCE) * h
        val = {key: float(self.p0[m] @ g[m] / self.p0[m].sum()) if self.p0[m].sum() > 0 else 0.0
               for key, m in groups.items()}
        table = np.array([val[k] for k in keys])
        return lambda X: table[self.lookup(X)]

    def outcome_parts(self, cols, ps_shift: float = 0.0) -> OutcomeShiftParts:
        """Exact pieces for the detailed outcome estimator.

        ``ps_shift`` perturbs the shifted outcome probabilities, to check that
        the correction removes the resulting bias.
        """
        cols = tuple(int(c) for c in cols)
        comp = tuple(j for j in range(self.d) if j not in cols)
        codes = self.codes()
        ps = np.clip(self.shifted_outcome_table(cols) + ps_shift, 1e-6, 1 - 1e-6)
        # p1(x_s, x_rest | bin) pieces for the conditional density ratio.
        keys_s, _ = self._marginal_keys(cols)
        keys_c, _ = self._marginal_keys(comp)
        p_s_bin: dict = {}
        p_c_bin: dict = {}
        p_bin: dict = {}
        for k in range(self.K):
            b = int(codes[k])
            p_s_bin[(keys_s[k], b)] = p_s_bin.get((keys_s[k], b), 0.0) + self.p1[k]
            p_c_bin[(keys_c[k], b)] = p_c_bin.get((keys_c[k], b), 0.0) + self.p1[k]
            p_bin[b] = p_bin.get(b, 0.0) + self.p1[k]
        freq = np.zeros(self.bins + 1)
        for b, v in p_bin.items():
            freq[b] = v
        lookup_ps = {}
        for k in range(self.K):
            lookup_ps[(keys_s[k], int(codes[k]))] = ps[k]

        def ps_prob(xs, cds):
            xs = np.asarray(xs, dtype=float)
            return np.array([lookup_ps[(tuple(r), int(c))] for r, c in zip(xs, cds)])

        def pi_v(xs, u, cds):
            xs = np.asarray(xs, dtype=float)
            u = np.asarray(u, dtype=float)
            full = np.empty((xs.shape[0], self.d))
            full[:, list(cols)] = xs
            full[:, list(comp)] = u
            k = self.lookup(full)
            out = np.zeros(k.size)
            for i, (kk, c) in enumerate(zip(k, cds)):
                c = int(c)
                if int(codes[kk]) != c:
                    continue
                joint = self.p1[kk] / p_bin[c]
                out[i] = joint * (p_bin[c] / p_s_bin[(keys_s[kk], c)]) / (
                    p_c_bin[(keys_c[kk], c)] / p_bin[c])
            return out

        return OutcomeShiftParts(self.model, lambda X: codes[self.lookup(X)], ps_prob, pi_v,
                                 freq, cols, comp)


def _oracle_value(spec: DiscreteSpec, kind: str, h: np.ndarray, tau: float, cols) -> float:
    z0, z1 = spec.z(SOURCE), spec.z(TARGET)
    e1h = spec.p1 @ h
    e0h = spec.p0 @ h
    if kind == "agg_outcome":
        return float(spec.p1 @ ((z1 - z0) * h) / e1h - tau)
    if kind == "agg_covariate":
        return float(spec.p1 @ (z0 * h) / e1h - spec.p0 @ (z0 * h) / e0h - tau)
    if kind == "detail_outcome":
        zs = conditional_zero_one_loss(spec.pred, spec.shifted_outcome_table(cols))
        return float(spec.p1 @ ((z1 - zs) * h) / e1h - tau)
    if kind == "detail_covariate":
        ps = spec.p0 * spec.subset_ratio_table(cols)
        return float(spec.p1 @ (z0 * h) / e1h - ps @ (z0 * h) / (ps @ h) - tau)
    raise ValidationError(f"unknown kind {kind!r}")


def oracle_mcee(spec: DiscreteSpec, kind: str, subgroup=None, tau: float = 0.0, subset=(),
                epsilon: float = 0.05, max_enumerate: int = 16) -> float:
    """Exact conditional expected exceedence on a finite support.

    With ``subgroup`` given (boolean or 0/1 vector over support points) returns
    the value for that subgroup. With ``subgroup=None`` returns the supremum
    over all subgroups whose mass is at least ``epsilon`` in both domains
    (``-inf`` if none qualifies), by enumerating every indicator; this needs
    ``K <= max_enumerate``.

    Raises
    ------
    SupportTooLargeError
        More than 64 support points, or too many to enumerate.
    """
    cols = tuple(subset.column_indices) if isinstance(subset, FeatureSubset) else tuple(subset)
    if spec.K > 64:
        raise SupportTooLargeError(f"support has {spec.K} points; the oracle handles at most 64")
    if subgroup is not None:
        h = np.asarray(subgroup, dtype=float)
        if h.shape != (spec.K,):
            raise ValidationError("subgroup must have one entry per support point")
        return _oracle_value(spec, kind, h, tau, cols)
    if spec.K > max_enumerate:
        raise SupportTooLargeError(
            f"enumerating {2 ** spec.K} subgroups of {spec.K} points is not supported")
    best = -math.inf
    for mask in range(1, 2 ** spec.K):
        h = np.array([(mask >> k) & 1 for k in range(spec.K)], dtype=float)
        if spec.p0 @ h < epsilon or spec.p1 @ h < epsilon:
            continue
        if kind == "detail_covariate":
            if (spec.p0 * spec.subset_ratio_table(cols)) @ h <= 0:
                continue
        best = max(best, _oracle_value(spec, kind, h, tau, cols))
    return best
