"""Corrected estimators of the conditional expected exceedence."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dataset
from shiftdiag.data import SOURCE, TARGET
from shiftdiag.errors import DegenerateDetectorError
from shiftdiag.estimators import (
    AGG_COVARIATE, AGG_OUTCOME, DETAIL_COVARIATE, DETAIL_OUTCOME, OutcomeShiftParts, VStatKernel,
    mcee_agg_covariate, mcee_agg_outcome, mcee_detailed_covariate, mcee_detailed_outcome,
    plugin_agg_covariate, plugin_agg_outcome, plugin_mcee, vstat_components, vstatistic,
    vstatistic_naive,
)
from shiftdiag.nuisance import conditional_zero_one_loss
from shiftdiag.simlab import DiscreteSpec, oracle_mcee


def _matrix_kernel(M, symmetrized=False):
    return VStatKernel(lambda I, J: M[np.ix_(I, J)], symmetrized)


def _ones(X):
    return np.ones(np.asarray(X).shape[0])


class TestVStatistic:
    @given(st.integers(1, 200), st.integers(0, 2**31 - 1))
    @settings(max_examples=60, deadline=None)
    def test_matches_naive_loop(self, n, seed):
        M = np.random.default_rng(seed).normal(size=(n, n))
        kernel = _matrix_kernel(M)
        naive = vstatistic_naive(kernel, n)
        assert vstatistic(kernel, n) == pytest.approx(naive, rel=1e-12, abs=1e-15)

    def test_projections(self, rng):
        M = rng.normal(size=(40, 40))
        value, rows, cols = vstat_components(_matrix_kernel(M), 40, block_pairs=37)
        np.testing.assert_allclose(rows, M.mean(axis=1), rtol=1e-12)
        np.testing.assert_allclose(cols, M.mean(axis=0), rtol=1e-12)
        assert value == pytest.approx(M.mean(), rel=1e-12)

    def test_groups_skip_vanishing_pairs(self, rng):
        n = 120
        g = rng.integers(0, 4, n)
        M = rng.normal(size=(n, n)) * (g[:, None] == g[None, :])
        full = vstat_components(_matrix_kernel(M), n)
        grouped = vstat_components(_matrix_kernel(M), n, groups=g, block_pairs=50)
        assert grouped[0] == pytest.approx(full[0], rel=1e-12)
        np.testing.assert_allclose(grouped[1], full[1], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(grouped[2], full[2], rtol=1e-12, atol=1e-15)

    def test_weights_equal_expanded_rows(self, rng):
        m = 15
        counts = rng.integers(1, 5, m)
        g_u = rng.integers(0, 3, m)
        B = rng.normal(size=(m, m)) * (g_u[:, None] == g_u[None, :])
        idx = np.repeat(np.arange(m), counts)
        expanded = vstat_components(_matrix_kernel(B[np.ix_(idx, idx)]), idx.size)
        weighted = vstat_components(_matrix_kernel(B), m, groups=g_u, weights=counts)
        assert weighted[0] == pytest.approx(expanded[0], rel=1e-12)
        np.testing.assert_allclose(weighted[1][idx], expanded[1], rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(weighted[2][idx], expanded[2], rtol=1e-12, atol=1e-15)

    def test_symmetrized(self, rng):
        M = rng.normal(size=(10, 10))
        sym = _matrix_kernel(M, symmetrized=True)
        assert sym(2, 7) == pytest.approx(0.5 * (M[2, 7] + M[7, 2]))
        assert vstatistic(sym, 10) == pytest.approx(M.mean(), rel=1e-12)

    def test_rows_argument_may_be_a_collection(self, rng):
        M = rng.normal(size=(5, 5))
        assert vstatistic(_matrix_kernel(M), list(range(5))) == pytest.approx(M.mean())

    def test_bad_inputs(self):
        kernel = _matrix_kernel(np.zeros((3, 3)))
        with pytest.raises(ValueError):
            vstat_components(kernel, 0)
        with pytest.raises(ValueError):
            vstat_components(kernel, 3, weights=[1, -1, 1])


def _discrete(seed, levels=(2, 2, 2)):
    return DiscreteSpec.random(np.random.default_rng(seed), levels=levels)


def _samples(spec, n, seed):
    rng = np.random.default_rng(seed)
    return spec.sample(SOURCE, n, rng), spec.sample(TARGET, n, rng)


def _table_detector(spec, h):
    return lambda X: h[spec.lookup(X)].astype(np.int64)


class TestAggOutcome:
    def test_ratio_identity_and_centering(self, rng):
        spec = _discrete(1)
        src, tgt = _samples(spec, 2000, 2)
        res = mcee_agg_outcome(src, tgt, spec.z0, spec.ratio, _ones, 0.03)
        assert res.estimate == pytest.approx(res.numerator / res.denominator, rel=1e-14)
        assert res.kind == AGG_OUTCOME
        assert res.influence.shape == (src.n + tgt.n,)
        assert abs(res.influence[:src.n].sum()) < 1e-9
        assert abs(res.influence[src.n:].sum()) < 1e-9
        assert res.standard_error > 0

    def test_enumeration_with_full_detector(self):
        spec = _discrete(3, levels=(2, 2))
        src, tgt = _samples(spec, 20000, 4)
        res = mcee_agg_outcome(src, tgt, spec.z0, spec.ratio, _ones, 0.0)
        truth = oracle_mcee(spec, "agg_outcome", np.ones(spec.K))
        assert spec.p1 @ (spec.z(TARGET) - spec.z(SOURCE)) == pytest.approx(truth)
        assert abs(res.estimate - truth) <= 3 * res.standard_error

    def test_correction_removes_nuisance_bias(self):
        spec = _discrete(5)
        src, tgt = _samples(spec, 20000, 6)
        h = (np.arange(spec.K) % 2 == 0).astype(float)
        det = _table_detector(spec, h)
        bad_z0 = lambda X: np.clip(spec.z0(X) + 0.15, 0, 1)  # noqa: E731
        res = mcee_agg_outcome(src, tgt, bad_z0, spec.ratio, det, 0.0)
        truth = oracle_mcee(spec, "agg_outcome", h)
        assert abs(res.estimate - truth) <= 3 * res.standard_error
        assert abs(res.plugin_estimate - truth) > 0.1

    def test_plugin_matches_direct_formula(self):
        spec = _discrete(7)
        src, tgt = _samples(spec, 500, 8)
        h = np.ones(spec.K)
        h[0] = 0
        det = _table_detector(spec, h)
        hx = det(tgt.features)
        direct = np.sum((tgt.loss - spec.z0(tgt.features) - 0.1) * hx) / hx.sum()
        assert plugin_agg_outcome(tgt, spec.z0, det, 0.1) == pytest.approx(direct, rel=1e-12)
        assert plugin_mcee(AGG_OUTCOME, eval_target=tgt, z0=spec.z0, detector=det,
                           tau=0.1) == pytest.approx(direct, rel=1e-12)
        res = mcee_agg_outcome(src, tgt, spec.z0, spec.ratio, det, 0.1)
        assert res.plugin_estimate == pytest.approx(direct, rel=1e-12)

    def test_degenerate_detector(self):
        spec = _discrete(9)
        src, tgt = _samples(spec, 200, 1)
        zero = lambda X: np.zeros(len(X), np.int64)  # noqa: E731
        with pytest.raises(DegenerateDetectorError):
            mcee_agg_outcome(src, tgt, spec.z0, spec.ratio, zero, 0.0)


class TestDetailedOutcome:
    def test_full_subset_reduces_to_aggregate_path(self):
        spec = _discrete(11)
        _, tgt = _samples(spec, 3000, 12)
        cols = tuple(range(spec.d))
        parts = spec.outcome_parts(cols, ps_shift=0.05)
        h = np.ones(spec.K)
        h[1] = 0
        det = _table_detector(spec, h)
        res = mcee_detailed_outcome(tgt, parts, det, 0.02)
        zs = lambda X: conditional_zero_one_loss(  # noqa: E731
            parts.model(X), parts.ps_prob(X, parts.bin_codes(X)))
        agg = mcee_agg_outcome(tgt, tgt, zs, _ones, det, 0.02)
        assert res.estimate == pytest.approx(agg.estimate, abs=1e-10)
        assert res.estimate == pytest.approx(-0.02, abs=1e-10)

    def test_enumeration_two_bins(self):
        spec = _discrete(13, levels=(2, 2, 2))
        _, tgt = _samples(spec, 20000, 14)
        cols = (0,)
        parts = spec.outcome_parts(cols, ps_shift=0.1)
        h = np.ones(spec.K)
        res = mcee_detailed_outcome(tgt, parts, _table_detector(spec, h), 0.0)
        truth = oracle_mcee(spec, "detail_outcome", h, subset=cols)
        assert abs(res.estimate - truth) <= 3 * res.standard_error
        assert abs(res.plugin_estimate - truth) > abs(res.estimate - truth)

    def test_influence_and_terms(self):
        spec = _discrete(15)
        _, tgt = _samples(spec, 1000, 16)
        res = mcee_detailed_outcome(tgt, spec.outcome_parts((1,)), _ones, 0.0)
        assert res.kind == DETAIL_OUTCOME
        assert res.n_source == 0 and res.influence.shape == (tgt.n,)
        assert abs(res.influence.sum()) < 1e-8
        assert res.estimate == pytest.approx(res.numerator / res.denominator, rel=1e-14)
        assert set(res.terms) >= {"target_loss", "vstatistic", "shifted_loss_plugin"}

    def test_dedup_matches_direct_kernel(self):
        # Distinct continuous rows take the direct path; duplicating every row
        # takes the weighted path and must give the same value.
        rng = np.random.default_rng(17)
        n = 60
        X = rng.normal(size=(n, 2))
        y = rng.integers(0, 2, n)
        pred = (X[:, 0] > 0).astype(float)
        tgt = make_dataset(X, y, pred, TARGET)
        tgt2 = make_dataset(np.vstack([X, X]), np.r_[y, y], np.r_[pred, pred], TARGET)
        parts = OutcomeShiftParts(
            model=lambda X: (X[:, 0] > 0).astype(float),
            bin_codes=lambda X: (X[:, 1] > 0).astype(np.int64),
            ps_prob=lambda xs, c: 0.3 + 0.4 * (np.asarray(xs)[:, 0] > 0.5),
            pi_v=lambda xs, u, c: 1.0 + 0.5 * np.tanh(np.asarray(u)[:, 0]),
            bin_freq=np.array([0.5, 0.5]), columns=(0,), complement=(1,))
        a = mcee_detailed_outcome(tgt, parts, _ones, 0.0)
        b = mcee_detailed_outcome(tgt2, parts, _ones, 0.0)
        assert b.estimate == pytest.approx(a.estimate, rel=1e-12)
        np.testing.assert_allclose(b.influence, np.r_[a.influence, a.influence], rtol=1e-10,
                                   atol=1e-13)


class TestAggCovariate:
    def test_enumeration_with_biased_loss_model(self):
        spec = _discrete(19)
        src, tgt = _samples(spec, 20000, 20)
        h = (spec.support[:, 0] == 1).astype(float)
        bad_z0 = lambda X: np.clip(spec.z0(X) - 0.1, 0, 1)  # noqa: E731
        res = mcee_agg_covariate(src, tgt, bad_z0, spec.ratio, _table_detector(spec, h), 0.01)
        truth = oracle_mcee(spec, "agg_covariate", h, tau=0.01)
        assert abs(res.estimate - truth) <= 3 * res.standard_error
        assert res.estimate == pytest.approx(res.numerator / res.denominator, rel=1e-14)

    def test_plugin(self):
        spec = _discrete(21)
        src, tgt = _samples(spec, 400, 22)
        direct = spec.z0(tgt.features).mean() - src.loss.mean() - 0.05
        got = plugin_agg_covariate(src, tgt, spec.z0, _ones, 0.05)
        assert got == pytest.approx(direct, rel=1e-12)
        assert mcee_agg_covariate(src, tgt, spec.z0, spec.ratio, _ones,
                                  0.05).plugin_estimate == pytest.approx(direct, rel=1e-12)

    def test_centered_influence(self):
        spec = _discrete(23)
        src, tgt = _samples(spec, 800, 24)
        res = mcee_agg_covariate(src, tgt, spec.z0, spec.ratio, _ones, 0.0)
        assert abs(res.influence[:src.n].sum()) < 1e-9
        assert abs(res.influence[src.n:].sum()) < 1e-9
        assert res.kind == AGG_COVARIATE


class TestDetailedCovariate:
    def test_reduces_to_aggregate(self):
        spec = _discrete(25)
        src, tgt = _samples(spec, 3000, 26)
        h = (spec.support[:, 1] == 0).astype(float)
        det = _table_detector(spec, h)
        agg = mcee_agg_covariate(src, tgt, spec.z0, spec.ratio, det, 0.02)
        det_res = mcee_detailed_covariate(src, tgt, spec.z0, spec.ratio, _ones,
                                          lambda X: np.full(len(X), 0.3), det, 0.02)
        assert det_res.estimate == pytest.approx(agg.estimate, abs=1e-10)
        assert det_res.plugin_estimate == pytest.approx(agg.plugin_estimate, abs=1e-10)
        np.testing.assert_allclose(det_res.influence, agg.influence, atol=1e-10)

    def test_enumeration_with_biased_nuisances(self):
        spec = _discrete(27)
        src, tgt = _samples(spec, 20000, 28)
        cols = (0,)
        h = (spec.support[:, 2] == 1).astype(float)
        bad_z0 = lambda X: np.clip(spec.z0(X) + 0.1, 0, 1)  # noqa: E731
        zbar = spec.zbar(cols, h)
        bad_zbar = lambda X: zbar(X) * 0.7  # noqa: E731
        res = mcee_detailed_covariate(src, tgt, bad_z0, spec.ratio, spec.subset_ratio(cols),
                                      bad_zbar, _table_detector(spec, h), 0.0)
        truth = oracle_mcee(spec, "detail_covariate", h, subset=cols)
        assert abs(res.estimate - truth) <= 3 * res.standard_error
        assert res.kind == DETAIL_COVARIATE

    def test_plugin_dispatch(self):
        spec = _discrete(29)
        src, tgt = _samples(spec, 500, 30)
        rs = spec.subset_ratio((0,))
        kw = dict(eval_source=src, eval_target=tgt, z0=spec.z0, ratio_s=rs, detector=_ones,
                  tau=0.0)
        res = mcee_detailed_covariate(src, tgt, spec.z0, spec.ratio, rs, _ones, _ones, 0.0)
        assert plugin_mcee(DETAIL_COVARIATE, **kw) == pytest.approx(res.plugin_estimate, rel=1e-12)

    def test_to_dict(self):
        spec = _discrete(31)
        src, tgt = _samples(spec, 300, 32)
        d = mcee_agg_covariate(src, tgt, spec.z0, spec.ratio, _ones, 0.0).to_dict()
        assert d["standard_error"] > 0 and d["n_source"] == 300
