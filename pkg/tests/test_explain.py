"""Rule summaries and in-subgroup statistics."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dataset
from shiftdiag.data import TARGET
from shiftdiag.explain import RuleSet, Term, candidate_cuts, subgroup_stats, summarize_subgroup
from shiftdiag.inference import run_hierarchy
from shiftdiag.simlab import attach_predictions, generate_setup, setup_spec, train_study_model


def _data(n=4000, d=3, seed=0, scale=2.0):
    rng = np.random.default_rng(seed)
    X = rng.normal(0, scale, size=(n, d))
    return make_dataset(X, np.zeros(n, int), names=[f"x{j + 1}" for j in range(d)])


class TestSummarizeSubgroup:
    def test_two_tails(self):
        data = _data()
        det = lambda X: (np.abs(X[:, 0]) > 3.5).astype(int)  # noqa: E731
        rs = summarize_subgroup(det, data)
        assert len(rs.clauses) == 2
        assert all(t.feature == 0 for clause in rs.clauses for t in clause)
        assert rs.coverage >= 0.9 and rs.precision >= 0.9

    def test_everything_flagged(self):
        data = _data(n=500)
        rs = summarize_subgroup(lambda X: np.ones(len(X), int), data)
        assert rs.clauses == ((),)
        assert rs.coverage == 1.0 and rs.precision == 1.0
        assert rs.text() == "(all rows)"

    def test_nothing_flagged(self):
        rs = summarize_subgroup(lambda X: np.zeros(len(X), int), _data(n=200))
        assert rs.clauses == () and "no rows" in rs.note
        assert rs.text() == "(no rule)"

    def test_conjunction(self):
        data = _data(seed=1)
        det = lambda X: ((X[:, 0] > 1) & (X[:, 2] <= 0)).astype(int)  # noqa: E731
        rs = summarize_subgroup(det, data)
        top = rs.clauses[0]
        assert {t.feature for t in top} == {0, 2}
        assert rs.coverage >= 0.9 and rs.precision >= 0.9

    @given(st.integers(0, 2**31 - 1), st.floats(-2, 2))
    @settings(max_examples=20, deadline=None)
    def test_stored_fidelity_reproduces(self, seed, cut):
        data = _data(n=600, seed=seed)
        det = lambda X: ((X[:, 1] > cut) | (X[:, 0] < -2)).astype(int)  # noqa: E731
        rs = summarize_subgroup(det, data)
        labels = det(data.features).astype(bool)
        match = rs.evaluate(data.features)
        if labels.any():
            assert rs.coverage == np.sum(match & labels) / labels.sum()
        if match.any():
            assert rs.precision == np.sum(match & labels) / match.sum()
        assert 0 <= rs.coverage <= 1 and 0 <= rs.precision <= 1
        assert len(rs.clauses) <= rs.max_clauses
        assert all(len(c) <= rs.max_terms for c in rs.clauses)
        assert all(0 <= t.feature < data.d for c in rs.clauses for t in c)

    def test_deterministic(self):
        data = _data(seed=2)
        det = lambda X: (X[:, 1] > 0.7).astype(int)  # noqa: E731
        assert summarize_subgroup(det, data) == summarize_subgroup(det, data)

    def test_no_redundant_clauses(self):
        data = _data(seed=3)
        det = lambda X: (X[:, 0] < -3).astype(int)  # noqa: E731
        rs = summarize_subgroup(det, data)
        full = rs.evaluate(data.features)
        for k in range(len(rs.clauses)):
            rest = RuleSet(rs.clauses[:k] + rs.clauses[k + 1:])
            if rest.clauses:
                assert not np.array_equal(rest.evaluate(data.features), full)

    def test_fitted_detector_uses_x1(self):
        spec = setup_spec("1a")
        model = train_study_model(spec, seed=0)
        src, tgt = generate_setup(spec, 0)
        src, tgt = attach_predictions(src, model), attach_predictions(tgt, model)
        report = run_hierarchy(src, tgt, [], spec.run_config(bootstrap_reps=100), model=model)
        det = report.aggregate["outcome"].detector
        rs = summarize_subgroup(det, tgt)
        assert any(t.name == "x1" for t in rs.clauses[0])


class TestRuleSet:
    def test_term_text_and_eval(self):
        t = Term(1, "age", ">", 40.0)
        X = np.array([[0, 39.0], [0, 41.0]])
        np.testing.assert_array_equal(t.evaluate(X), [False, True])
        assert t.text() == "age > 40"

    def test_text_and_dict(self):
        rs = RuleSet(((Term(0, "a", "<=", 1.0),), (Term(1, "b", ">", 2.5), Term(0, "a", ">", 0.0))),
                     0.8, 0.9)
        assert rs.text() == "(a <= 1) OR (b > 2.5 and a > 0)"
        d = rs.to_dict()
        assert d["text"] == rs.text() and len(d["clauses"]) == 2

    def test_candidate_cuts_inside_range(self):
        x = np.random.default_rng(4).normal(size=300)
        cuts = candidate_cuts(x, x > 2)
        assert np.all(cuts >= x.min()) and np.all(cuts < x.max())
        assert np.any(cuts > 2)


class TestSubgroupStats:
    def test_full_detector_gives_population_stats(self):
        rng = np.random.default_rng(5)
        src = make_dataset(rng.normal(size=(300, 2)), rng.integers(0, 2, 300), rng.random(300))
        tgt = make_dataset(rng.normal(size=(200, 2)), rng.integers(0, 2, 200), rng.random(200),
                           domain=TARGET)
        st_ = subgroup_stats(lambda X: np.ones(len(X), int), src, tgt)
        assert st_.prevalence_source == 1.0 and st_.prevalence_target == 1.0
        assert st_.loss_source == src.loss.mean() and st_.loss_target == tgt.loss.mean()
        assert st_.decay == tgt.loss.mean() - src.loss.mean()

    def test_planted_decay(self):
        rng = np.random.default_rng(6)
        n = 20000
        Xs, Xt = rng.normal(size=(n, 1)), rng.normal(size=(n, 1))
        inside_s, inside_t = Xs[:, 0] > 1, Xt[:, 0] > 1
        ys = (rng.random(n) < 0.1).astype(int)
        yt = (rng.random(n) < np.where(inside_t, 0.35, 0.1)).astype(int)
        src = make_dataset(Xs, ys, np.zeros(n))
        tgt = make_dataset(Xt, yt, np.zeros(n), domain=TARGET)
        st_ = subgroup_stats(lambda X: (X[:, 0] > 1).astype(int), src, tgt)
        se = np.sqrt(0.1 * 0.9 / inside_s.sum() + 0.35 * 0.65 / inside_t.sum())
        assert abs(st_.decay - 0.25) <= 2 * se
        assert st_.n_source == inside_s.sum() and st_.n_target == inside_t.sum()

    def test_empty_subgroup(self):
        src = make_dataset(np.zeros((10, 1)), np.zeros(10, int))
        tgt = make_dataset(np.ones((10, 1)), np.zeros(10, int), domain=TARGET)
        st_ = subgroup_stats(lambda X: (X[:, 0] > 0.5).astype(int), src, tgt)
        assert st_.loss_source is None and st_.decay is None and st_.note
        assert st_.prevalence_target == 1.0
        assert st_.to_dict()["decay"] is None

    @pytest.mark.parametrize("cut", [-1.0, 0.0, 1.0])
    def test_prevalences(self, cut):
        data = _data(n=1000, seed=7)
        st_ = subgroup_stats(lambda X: (X[:, 0] > cut).astype(int), data, data)
        assert st_.prevalence_source == np.mean(data.features[:, 0] > cut)
        assert st_.decay == 0.0
