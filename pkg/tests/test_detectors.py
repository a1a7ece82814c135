"""Subgroup detectors: plug-in outcome indicators and covariate grid search."""

from __future__ import annotations

import itertools
import json

import numpy as np
import pytest

from conftest import make_dataset
from shiftdiag.data import SOURCE, TARGET, FeatureSubset
from shiftdiag.detectors import (
    PREVALENCE_DEGENERATE, PREVALENCE_OK, GridSpec, default_grid, enforce_prevalence,
    fit_agg_covariate_detector, fit_agg_outcome_detector, fit_detailed_covariate_detector,
    fit_detailed_outcome_detector, fit_regression_outcome_detector,
)


def _rows(n, d=2, seed=0, domain=TARGET):
    rng = np.random.default_rng(seed)
    return make_dataset(rng.normal(size=(n, d)), np.zeros(n, int), domain=domain)


def _const(c):
    return lambda X: np.full(np.asarray(X).shape[0], float(c))


class TestOutcomeDetectors:
    def test_no_exceedence_gives_empty_detector(self):
        tgt = _rows(500)
        z = lambda X: 0.3 + 0.1 * np.tanh(X[:, 0])  # noqa: E731
        det = fit_agg_outcome_detector(z, z, 0.01, tgt)
        assert det.prevalence_target == 0.0
        assert det(tgt.features).sum() == 0

    def test_analytic_indicator(self):
        tgt = _rows(500)
        det = fit_agg_outcome_detector(_const(0.0), lambda X: X[:, 0], 0.0, tgt)
        X = tgt.features
        np.testing.assert_array_equal(det(X), (X[:, 0] > 0).astype(int))
        assert det.prevalence_target == pytest.approx(np.mean(X[:, 0] > 0))

    def test_strict_inequality_at_boundary(self):
        X = np.array([[0.0], [0.1], [0.2]])
        det = fit_agg_outcome_detector(_const(0.0), lambda X: X[:, 0], 0.1, _rows(5, 1))
        np.testing.assert_array_equal(det(X), [0, 0, 1])

    def test_outputs_are_zero_one(self):
        tgt = _rows(300)
        det = fit_agg_outcome_detector(lambda X: X[:, 1], lambda X: X[:, 0], 0.2, tgt, _rows(300, seed=1))
        out = det(tgt.features)
        assert out.dtype.kind == "i"
        assert set(np.unique(out)) <= {0, 1}
        assert 0 < det.prevalence_source < 1

    @pytest.mark.parametrize("tau", [0.0, 0.05, 0.3])
    def test_pointwise_indicator(self, tau):
        tgt = _rows(400, seed=2)
        up = lambda X: 0.5 + 0.3 * np.sin(X[:, 0])  # noqa: E731
        lo = lambda X: 0.4 + 0.2 * np.cos(X[:, 1])  # noqa: E731
        det = fit_detailed_outcome_detector(up, lo, tau, tgt, FeatureSubset("x2", (1,)))
        X = tgt.features
        np.testing.assert_array_equal(det(X), (up(X) - lo(X) > tau).astype(int))
        assert det.kind == "detail_outcome"
        assert det.subset.name == "x2"

    def test_constant_gap_above_tau_flags_everything(self):
        tgt = _rows(100)
        det = fit_detailed_outcome_detector(_const(0.5), _const(0.3), 0.1, tgt)
        assert det.prevalence_target == 1.0

    def test_to_dict_is_json(self):
        det = fit_agg_outcome_detector(_const(0.0), lambda X: X[:, 0], 0.0, _rows(50))
        d = json.loads(json.dumps(det.to_dict()))
        assert d["kind"] == "agg_outcome"
        assert d["omega"] is None and d["prevalence_source"] is None

    def test_regression_alternative(self):
        rng = np.random.default_rng(3)
        n = 3000
        X = rng.normal(size=(n, 2))
        y = (rng.random(n) < np.where(X[:, 0] > 1, 0.9, 0.1)).astype(int)
        tgt = make_dataset(X, y, np.zeros(n), domain=TARGET)
        det = fit_regression_outcome_detector(_const(0.1), 0.3, tgt)
        agree = np.mean(det(X) == (X[:, 0] > 1))
        assert agree > 0.95
        assert det.meta["strategy"] == "regression"


def _two_point(p0, p1, n=20000):
    """Rows on {0, 1} in exact proportions for each domain."""
    def rows(p, dom):
        k = int(round(p[0] * n))
        X = np.r_[np.zeros(k), np.ones(n - k)][:, None]
        return make_dataset(X, np.zeros(n, int), domain=dom)
    return rows(p0, SOURCE), rows(p1, TARGET)


def _covariate_mcee(h, z, p0, p1, tau):
    return (p1 @ (z * h)) / (p1 @ h) - (p0 @ (z * h)) / (p0 @ h) - tau


class TestAggCovariateDetector:
    def test_two_point_matches_brute_force(self):
        p0, p1 = np.array([0.5, 0.5]), np.array([0.8, 0.2])
        z = np.array([0.4, 0.1])
        src, tgt = _two_point(p0, p1)
        z0 = lambda X: z[X[:, 0].astype(int)]  # noqa: E731
        ratio = lambda X: (p1 / p0)[X[:, 0].astype(int)]  # noqa: E731
        det = fit_agg_covariate_detector(z0, ratio, 0.0, None, src, tgt, epsilon=0.05)
        best = max((h for h in itertools.product((0, 1), repeat=2) if any(h)),
                   key=lambda h: _covariate_mcee(np.array(h, float), z, p0, p1, 0.0))
        np.testing.assert_array_equal(det(np.array([[0.0], [1.0]])), best)
        assert det.omega == pytest.approx(1.0, rel=0.25)
        assert det.lam in default_grid(z0(src.features)).lam

    def test_selected_objective_dominates_grid(self):
        rng = np.random.default_rng(4)
        src = make_dataset(rng.normal(0, 1, size=(3000, 1)), np.zeros(3000, int))
        tgt = make_dataset(rng.normal(0.7, 1, size=(3000, 1)), np.zeros(3000, int), domain=TARGET)
        z0 = lambda X: 1 / (1 + np.exp(-2 * X[:, 0]))  # noqa: E731
        ratio = lambda X: np.exp(0.7 * X[:, 0] - 0.245)  # noqa: E731
        grid = default_grid(z0(src.features))
        det = fit_agg_covariate_detector(z0, ratio, 0.0, grid, src, tgt)
        assert det.feasible and det.meta["n_feasible"] > 0
        Xs, Xt = src.features, tgt.features
        for omega in grid.omega:
            for lam in grid.lam:
                h_s = (z0(Xs) - lam) * (ratio(Xs) * omega - 1) >= 0
                h_t = (z0(Xt) - lam) * (ratio(Xt) * omega - 1) >= 0
                if h_s.mean() < 0.05 or h_t.mean() < 0.05:
                    continue
                if abs(omega - h_s.mean() / h_t.mean()) > 0.25 * omega:
                    continue
                obj = np.mean(z0(Xs) * (ratio(Xs) * omega - 1) * h_s)
                assert det.objective >= obj - 1e-12

    def test_no_shift_candidates_at_unit_omega(self):
        rng = np.random.default_rng(5)
        src = make_dataset(rng.normal(size=(4000, 2)), np.zeros(4000, int))
        tgt = make_dataset(rng.normal(size=(4000, 2)), np.zeros(4000, int), domain=TARGET)
        z0 = lambda X: 1 / (1 + np.exp(-X[:, 0]))  # noqa: E731
        for lam in default_grid(z0(src.features)).lam:
            det = fit_agg_covariate_detector(z0, _const(1.0), 0.0, GridSpec((1.0,), (lam,)),
                                             src, tgt)
            # With ratio 1 and omega 1 the integrand vanishes on every set.
            assert det.objective is None or det.objective == 0.0

    def test_no_shift_selected_set_has_no_decay(self):
        from shiftdiag.estimators import mcee_agg_covariate

        rng = np.random.default_rng(5)
        fit_s, fit_t, ev_s, ev_t = (
            make_dataset(rng.normal(size=(4000, 2)), np.zeros(4000, int), domain=d)
            for d in (SOURCE, TARGET, SOURCE, TARGET))
        z0 = lambda X: 1 / (1 + np.exp(-X[:, 0]))  # noqa: E731
        det = fit_agg_covariate_detector(z0, _const(1.0), 0.0, None, fit_s, fit_t)
        res = mcee_agg_covariate(ev_s, ev_t, z0, _const(1.0), det, 0.0)
        # Losses here are all zero, so the held-out estimate is the target-minus-
        # source difference of Z0 on the selected set: pure sampling noise.
        assert abs(res.estimate) <= 3 * res.standard_error + 1e-12

    def test_rescaled_loss_selects_same_set(self):
        rng = np.random.default_rng(6)
        src = make_dataset(rng.normal(0, 1, size=(2000, 1)), np.zeros(2000, int))
        tgt = make_dataset(rng.normal(0.5, 1, size=(2000, 1)), np.zeros(2000, int), domain=TARGET)
        z0 = lambda X: 1 / (1 + np.exp(-X[:, 0]))  # noqa: E731
        ratio = lambda X: np.exp(0.5 * X[:, 0] - 0.125)  # noqa: E731
        grid = default_grid(z0(src.features))
        c = 3.0
        scaled_grid = GridSpec(grid.omega, tuple(c * v for v in grid.lam))
        a = fit_agg_covariate_detector(z0, ratio, 0.0, grid, src, tgt)
        b = fit_agg_covariate_detector(lambda X: c * z0(X), ratio, 0.0, scaled_grid, src, tgt)
        X = np.vstack([src.features, tgt.features])
        np.testing.assert_array_equal(a(X), b(X))

    def test_infeasible_grid_gives_zero_detector(self):
        src, tgt = _rows(200, domain=SOURCE), _rows(200, seed=1)
        det = fit_agg_covariate_detector(_const(0.2), _const(1.0), 0.0, GridSpec((4.0,), (0.0,)),
                                         src, tgt)
        assert not det.feasible
        assert det(src.features).sum() == 0
        assert enforce_prevalence(det, src, tgt, 0.05) == PREVALENCE_DEGENERATE

    def test_grid_validation(self):
        with pytest.raises(ValueError):
            GridSpec((), (0.1,))
        with pytest.raises(ValueError):
            GridSpec((2.0, 1.0), (0.1,))
        with pytest.raises(ValueError):
            GridSpec((0.0,), (0.1,))

    def test_default_grid_spans(self):
        z = np.random.default_rng(7).random(500)
        g = default_grid(z)
        assert g.omega[0] == pytest.approx(0.25) and g.omega[-1] == pytest.approx(4.0)
        assert len(g.omega) == 17
        assert g.lam[0] == z.min() and g.lam[-1] == z.max()


class TestDetailedCovariateDetector:
    def test_full_subset_explains_everything(self):
        from shiftdiag.estimators import mcee_detailed_covariate

        rng = np.random.default_rng(8)
        fit_s, ev_s = (make_dataset(rng.normal(0, 1, size=(3000, 1)), np.zeros(3000, int))
                       for _ in range(2))
        fit_t, ev_t = (make_dataset(rng.normal(0.7, 1, size=(3000, 1)), np.zeros(3000, int),
                                    domain=TARGET) for _ in range(2))
        z0 = lambda X: 1 / (1 + np.exp(-2 * X[:, 0]))  # noqa: E731
        ratio = lambda X: np.exp(0.7 * X[:, 0] - 0.245)  # noqa: E731
        det = fit_detailed_covariate_detector(z0, ratio, ratio, 0.02, None, fit_s, fit_t,
                                              FeatureSubset("x1", (0,)))
        assert det.kind == "detail_covariate"
        # At omega = 1 the integrand is -tau * ratio, so no candidate gains there.
        X = fit_s.features
        assert np.all(z0(X) * (ratio(X) - ratio(X)) - 0.02 * ratio(X) < 0)
        # Shifting x1 explains the whole decay: the held-out estimate is -tau.
        res = mcee_detailed_covariate(ev_s, ev_t, z0, ratio, ratio,
                                      lambda X: z0(X) * det(X), det, 0.02)
        assert abs(res.estimate + 0.02) <= 3 * res.standard_error

    def test_unexplained_shift_is_found(self):
        rng = np.random.default_rng(9)
        n = 4000
        src = make_dataset(rng.normal(0, 1, size=(n, 2)), np.zeros(n, int))
        tgt = make_dataset(rng.normal([0.0, 0.7], 1, size=(n, 2)), np.zeros(n, int), domain=TARGET)
        z0 = lambda X: 1 / (1 + np.exp(-2 * X[:, 1]))  # noqa: E731
        ratio = lambda X: np.exp(0.7 * X[:, 1] - 0.245)  # noqa: E731
        det = fit_detailed_covariate_detector(z0, ratio, _const(1.0), 0.0, None, src, tgt,
                                              FeatureSubset("x1", (0,)))
        assert det.feasible
        assert det.objective > 0.01


class TestEnforcePrevalence:
    def test_all_one(self):
        src, tgt = _rows(100, domain=SOURCE), _rows(100)
        assert enforce_prevalence(lambda X: np.ones(len(X), int), src, tgt, 0.05) == PREVALENCE_OK

    def test_all_zero(self):
        src, tgt = _rows(100, domain=SOURCE), _rows(100)
        assert enforce_prevalence(lambda X: np.zeros(len(X), int), src, tgt, 0.05) == PREVALENCE_DEGENERATE

    def test_target_below_epsilon(self):
        X0 = np.zeros((100, 1))
        X0[:50] = 1.0
        X1 = np.zeros((100, 1))
        X1[:4] = 1.0
        src = make_dataset(X0, np.zeros(100, int))
        tgt = make_dataset(X1, np.zeros(100, int), domain=TARGET)
        det = lambda X: (X[:, 0] > 0.5).astype(int)  # noqa: E731
        assert enforce_prevalence(det, src, tgt, 0.05) == PREVALENCE_DEGENERATE
        assert enforce_prevalence(det, src, tgt, 0.04) == PREVALENCE_OK
