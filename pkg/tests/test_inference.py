"""Bootstrap p-values, flag sets and the two-stage orchestration."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dataset
from shiftdiag import inference
from shiftdiag.config import RunConfig
from shiftdiag.data import SOURCE, TARGET, FeatureSubset
from shiftdiag.errors import ShiftDiagError, ValidationError
from shiftdiag.inference import (
    BootstrapDraws, TestResult, bootstrap_statistics, decomposition, flag_set,
    multiplier_bootstrap_pvalue, multiplier_weights, run_hierarchy,
)
from shiftdiag.report import report_json
from shiftdiag.simlab import attach_predictions, generate_setup, setup_spec, train_study_model

SUBSETS = [FeatureSubset(f"X{j + 1}", (j,)) for j in range(4)]


class TestMultiplierBootstrap:
    def test_zero_influence(self):
        p, draws = multiplier_bootstrap_pvalue((0.0, np.zeros(50)), 200, 1)
        assert p == 1.0 and draws is None

    def test_gaussian_tail(self):
        n = 1000
        psi = np.random.default_rng(0).standard_normal(n)
        psi = (psi - psi.mean()) / psi.std()
        p, draws = multiplier_bootstrap_pvalue((1.96 / math.sqrt(n), psi), 4000, 3)
        assert p == pytest.approx(0.025, abs=0.01)
        assert draws.statistics.shape == (4000,)
        assert np.all(np.isfinite(draws.statistics))

    def test_null_calibration(self):
        rng = np.random.default_rng(4)
        n, trials, reps = 200, 400, 200
        rejections = 0
        for t in range(trials):
            psi = rng.standard_normal(n)
            p, _ = multiplier_bootstrap_pvalue((psi.mean(), psi), reps, seed=t)
            rejections += p <= 0.05
        assert 0.02 <= rejections / trials <= 0.09

    def test_statistics_are_weighted_centered_means(self):
        psi = np.random.default_rng(5).normal(size=30) + 2.0
        stats = bootstrap_statistics(psi, 150, seed=9)
        xi = multiplier_weights(9, 150, 30)
        np.testing.assert_allclose(stats, xi @ (psi - psi.mean()) / 30, rtol=1e-12)

    def test_replicates_regenerate_independently(self):
        a = multiplier_weights(11, 5, 20)
        b = multiplier_weights(11, 130, 20)
        np.testing.assert_array_equal(a, b[:5])
        draws = BootstrapDraws(130, 11, 20, np.zeros(130))
        np.testing.assert_array_equal(draws.weights(), b)

    def test_reproducible_and_seed_dependent(self):
        psi = np.random.default_rng(6).normal(size=100)
        p1, d1 = multiplier_bootstrap_pvalue((0.05, psi), 300, 2)
        p2, d2 = multiplier_bootstrap_pvalue((0.05, psi), 300, 2)
        _, d3 = multiplier_bootstrap_pvalue((0.05, psi), 300, 3)
        assert p1 == p2
        np.testing.assert_array_equal(d1.statistics, d2.statistics)
        assert not np.array_equal(d1.statistics, d3.statistics)

    @given(st.floats(-1, 1), st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_monotone_in_estimate(self, est, step):
        psi = np.random.default_rng(7).normal(size=60)
        _, draws = multiplier_bootstrap_pvalue((0.0, psi), 100, 0)
        assert draws.p_value(est + step) <= draws.p_value(est)
        assert 1 / 101 <= draws.p_value(est) <= 1.0

    def test_too_few_replicates(self):
        with pytest.raises(ValidationError):
            multiplier_bootstrap_pvalue((0.0, np.ones(5)), 99, 0)


def _result(p, degenerate=False):
    return TestResult("H0s_YX", p, (p <= 0.05) and not degenerate, degenerate)


class TestFlagSet:
    def test_literal_definition(self):
        res = {"a": _result(0.5), "b": _result(0.01), "c": _result(0.05), "d": _result(0.051)}
        assert flag_set(res, 0.05) == ["a", "d"]

    def test_failed_tests_are_not_flagged(self):
        res = {"a": _result(math.nan), "b": _result(1.0, degenerate=True)}
        assert flag_set(res, 0.05) == ["b"]

    def test_degenerate_result_serializes(self):
        d = _result(1.0, degenerate=True).to_dict()
        assert d["p_value"] == 1.0 and d["degenerate"] and not d["rejected"]
        assert _result(math.nan).to_dict()["p_value"] is None


class TestDecomposition:
    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=25, deadline=None)
    def test_terms_add_up(self, seed):
        rng = np.random.default_rng(seed)
        src = make_dataset(rng.normal(size=(80, 2)), rng.integers(0, 2, 80), rng.random(80))
        tgt = make_dataset(rng.normal(size=(60, 2)), rng.integers(0, 2, 60), rng.random(60),
                           domain=TARGET)
        d = decomposition(src, tgt, lambda X: 1 / (1 + np.exp(-X[:, 0])))
        assert d["covariate"] + d["outcome"] == pytest.approx(d["total"], abs=1e-10)
        assert d["total"] == pytest.approx(tgt.loss.mean() - src.loss.mean(), abs=1e-12)


def _setup2(n=3000, seed=0):
    spec = setup_spec("2").scaled(n / 8000)
    model = train_study_model(spec, seed=seed)
    src, tgt = generate_setup(spec, seed)
    return spec, model, attach_predictions(src, model), attach_predictions(tgt, model)


@pytest.fixture(scope="module")
def setup2_run():
    spec, model, src, tgt = _setup2()
    cfg = spec.run_config(bootstrap_reps=300, seed=1)
    subsets = SUBSETS + [FeatureSubset("all", (0, 1, 2, 3))]
    report = run_hierarchy(src, tgt, subsets, cfg, model=model)
    return spec, model, src, tgt, cfg, subsets, report


class TestHierarchy:
    def test_outcome_branch_expands(self, setup2_run):
        *_, report = setup2_run
        out = report.aggregate["outcome"]
        assert out.rejected
        assert set(report.detailed_outcome) == {"X1", "X2", "X3", "X4", "all"}
        assert out.subgroup_summary is not None and out.subgroup_stats is not None

    def test_gating(self, setup2_run):
        *_, report = setup2_run
        for branch in ("covariate", "outcome"):
            detail = getattr(report, f"detailed_{branch}")
            if not report.aggregate[branch].rejected:
                assert detail == {} and report.flags[branch] == []
        assert not report.forced

    def test_flags_recompute_from_p_values(self, setup2_run):
        *_, cfg, _, report = setup2_run
        d = report.to_dict()
        for branch in ("covariate", "outcome"):
            detail = d[f"detailed_{branch}"]
            again = sorted(k for k, r in detail.items()
                           if r["p_value"] is not None and r["p_value"] > cfg.alpha)
            assert again == d["flags"][branch]

    def test_full_subset_is_flagged(self, setup2_run):
        *_, report = setup2_run
        assert "all" in report.flags["outcome"]
        assert report.detailed_outcome["all"].p_value > 0.5

    def test_decomposition_stored(self, setup2_run):
        *_, report = setup2_run
        dec = report.decomposition
        assert dec["covariate"] + dec["outcome"] == pytest.approx(dec["total"], abs=1e-10)

    def test_result_invariants(self, setup2_run):
        *_, cfg, _, report = setup2_run
        results = [*report.aggregate.values(), *report.detailed_outcome.values(),
                   *report.detailed_covariate.values()]
        for r in results:
            assert r.rejected == (r.p_value <= cfg.alpha and not r.degenerate)
            if r.degenerate:
                assert r.p_value == 1.0

    def test_deterministic(self, setup2_run):
        _, model, src, tgt, cfg, subsets, report = setup2_run
        again = run_hierarchy(src, tgt, subsets, cfg, model=model)
        assert report_json(again) == report_json(report)

    def test_seed_changes_bootstrap(self, setup2_run):
        _, model, src, tgt, cfg, _, report = setup2_run
        other = run_hierarchy(src, tgt, SUBSETS[:1], cfg.updated(seed=2), model=model)
        assert report_json(other) != report_json(report)

    def test_report_json_is_strict(self, setup2_run):
        *_, report = setup2_run
        text = report_json(report)
        assert "NaN" not in text and "Infinity" not in text


class TestHierarchyEdgeCases:
    def test_identical_domains(self):
        spec, model, src, _ = _setup2(n=2000, seed=3)
        tgt = src.__class__(src.features, src.outcome, TARGET, src.predictions, None,
                            src.column_names)
        report = run_hierarchy(src, tgt, SUBSETS, spec.run_config(bootstrap_reps=200), model=model)
        assert not report.aggregate["covariate"].rejected
        assert not report.aggregate["outcome"].rejected
        assert report.detailed_covariate == {} and report.detailed_outcome == {}
        assert abs(report.decomposition["total"]) < 0.03

    def test_forced_detailed_is_recorded(self):
        spec, model, src, tgt = _setup2(n=2000, seed=4)
        cfg = spec.run_config(bootstrap_reps=200, loss_filter=False)
        report = run_hierarchy(src, tgt, SUBSETS[:2], cfg, model=model, force_detailed=True)
        assert report.forced and report.to_dict()["forced_detailed"] is True
        assert set(report.detailed_covariate) == {"X1", "X2"}
        assert set(report.detailed_outcome) == {"X1", "X2"}

    def test_failures_are_isolated(self, monkeypatch):
        spec, model, src, tgt = _setup2(n=2000, seed=5)
        real = inference.fit_shifted_outcome

        def flaky(train_target, s, *args, **kw):
            if s.name == "X3":
                raise ShiftDiagError("planted failure")
            return real(train_target, s, *args, **kw)

        monkeypatch.setattr(inference, "fit_shifted_outcome", flaky)
        report = run_hierarchy(src, tgt, SUBSETS, spec.run_config(bootstrap_reps=200),
                               model=model, force_detailed=True)
        bad = report.detailed_outcome["X3"]
        assert math.isnan(bad.p_value) and "planted failure" in bad.error
        assert "X3" not in report.flags["outcome"]
        assert all(not math.isnan(report.detailed_outcome[k].p_value) for k in ("X1", "X2", "X4"))
        assert any("planted failure" in e for e in report.errors)

    def test_column_mismatch(self):
        _, model, src, tgt = _setup2(n=400, seed=6)
        renamed = tgt.__class__(tgt.features, tgt.outcome, TARGET, tgt.predictions, None,
                                ("a", "b", "c", "d"))
        with pytest.raises(ValidationError):
            run_hierarchy(src, renamed, None, RunConfig(), model=model)

    def test_surrogate_model_from_predictions(self):
        spec, _, src, tgt = _setup2(n=2000, seed=7)
        report = run_hierarchy(src, tgt, SUBSETS[:1], spec.run_config(bootstrap_reps=200))
        assert report.aggregate["outcome"].p_value is not None
        assert report.n_rows["source_eval"] + report.n_rows["source_train"] == src.n
