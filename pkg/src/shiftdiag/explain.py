"""Readable summaries of detected subgroups.

:func:`summarize_subgroup` approximates a detector with a short disjunction of
conjunctive threshold rules, learned by greedy sequential covering.
:func:`subgroup_stats` reports prevalence and mean loss inside the subgroup in
each domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import Dataset

LE = "<="
GT = ">"


@dataclass(frozen=True)
class Term:
    """A threshold predicate ``x[feature] <= cut`` or ``x[feature] > cut``."""

    feature: int
    name: str
    op: str
    cut: float

    def evaluate(self, X) -> np.ndarray:
        x = np.asarray(X, dtype=float)[:, self.feature]
        return x <= self.cut if self.op == LE else x > self.cut

    def text(self) -> str:
        return f"{self.name} {self.op} {self.cut:.4g}"

    def to_dict(self) -> dict:
        return {"feature": self.feature, "name": self.name, "op": self.op, "cut": float(self.cut)}


@dataclass(frozen=True)
class RuleSet:
    """Disjunction of conjunctions of :class:`Term`.

    An empty conjunction is true everywhere. ``coverage`` is the fraction of
    detected rows the rules match and ``precision`` the fraction of matched
    rows that are detected, both on the data used to learn the rules.
    """

    clauses: tuple[tuple[Term, ...], ...] = ()
    coverage: float = 0.0
    precision: float = 0.0
    max_clauses: int = 3
    max_terms: int = 3
    note: str = ""

    def evaluate(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.zeros(X.shape[0], dtype=bool)
        for clause in self.clauses:
            m = np.ones(X.shape[0], dtype=bool)
            for t in clause:
                m &= t.evaluate(X)
            out |= m
        return out

    def text(self) -> str:
        if not self.clauses:
            return "(no rule)"
        parts = []
        for clause in self.clauses:
            parts.append(" and ".join(t.text() for t in clause) if clause else "(all rows)")
        return " OR ".join(f"({p})" if len(self.clauses) > 1 else p for p in parts)

    def to_dict(self) -> dict:
        return {
            "clauses": [[t.to_dict() for t in c] for c in self.clauses],
            "text": self.text(),
            "coverage": float(self.coverage),
            "precision": float(self.precision),
            "max_clauses": self.max_clauses,
            "max_terms": self.max_terms,
            "note": self.note,
        }


def _fidelity(match: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    hit = float(np.sum(match & labels))
    pos = float(np.sum(labels))
    m = float(np.sum(match))
    return (hit / pos if pos else 0.0), (hit / m if m else 0.0)


def candidate_cuts(x: np.ndarray, detected: np.ndarray) -> np.ndarray:
    """Cut points for one feature.

    Deciles of the feature over all rows, together with quantiles in 2.5%
    steps over the detected rows. The second set lets a rule isolate a
    subgroup that lies entirely in one tail of the feature, which population
    deciles cannot resolve.
    """
    cuts = [np.quantile(x, np.linspace(0.1, 0.9, 9))]
    if detected.any():
        cuts.append(np.quantile(x[detected], np.linspace(0.025, 0.975, 39)))
    c = np.unique(np.concatenate(cuts))
    return c[(c >= x.min()) & (c < x.max())]


def _prune(clauses: list, X: np.ndarray) -> list:
    """Drop clauses whose removal leaves the matched rows unchanged."""
    full = RuleSet(tuple(clauses)).evaluate(X)
    kept = list(clauses)
    for clause in list(clauses):
        rest = [c for c in kept if c is not clause]
        if rest and np.array_equal(RuleSet(tuple(rest)).evaluate(X), full):
            kept = rest
    return kept


def summarize_subgroup(detector: Callable, data: Dataset, max_clauses: int = 3,
                       max_terms: int = 3, min_coverage: float = 0.10) -> RuleSet:
    """Greedy sequential covering of the rows flagged by ``detector``.

    Each clause starts empty and repeatedly adds the term with the largest
    information gain ``new * (log(precision_after) - log(precision_before))``,
    where ``new`` counts the still uncovered detected rows the clause keeps.
    Only terms that raise the precision and keep at least ``min_coverage`` of
    the detected rows not covered by earlier clauses are eligible; ties go to
    higher precision, larger new coverage, then feature and cut order. The
    gain prefers the widest of several equally precise cuts, where raw
    precision would pick whichever one sampling noise favours. A clause stops
    growing when no term raises its precision, when it reaches ``max_terms``,
    or at precision one. Clauses are added until
    ``max_clauses`` is reached or fewer than ``min_coverage`` of the detected
    rows remain uncovered. Clauses made redundant by later ones are then
    dropped.
    """
    X = data.features
    labels = np.asarray(detector(X)).astype(bool)
    total = int(labels.sum())
    if total == 0:
        return RuleSet((), 0.0, 0.0, max_clauses, max_terms,
                       note="detector flags no rows; nothing to summarize")
    names = data.column_names
    cuts = [candidate_cuts(X[:, j], labels) for j in range(X.shape[1])]
    conds = []
    for j in range(X.shape[1]):
        for c in cuts[j]:
            le = X[:, j] <= c
            conds.append((Term(j, names[j], LE, float(c)), le))
            conds.append((Term(j, names[j], GT, float(c)), ~le))
    need = min_coverage * total
    uncovered = labels.copy()
    clauses = []
    while len(clauses) < max_clauses and uncovered.sum() >= max(need, 1):
        mask = np.ones(X.shape[0], dtype=bool)
        precision = float(labels.mean())
        terms: list[Term] = []
        while len(terms) < max_terms and precision < 1.0:
            best = None
            for term, cond in conds:
                m = mask & cond
                new = int(np.sum(m & uncovered))
                if new < need or new == 0:
                    continue
                prec = float(np.sum(m & labels)) / float(np.sum(m))
                if prec <= precision:
                    continue
                key = (new * (math.log(prec) - math.log(precision)), prec, new)
                if best is None or key > best[0]:
                    best = (key, term, m)
            if best is None:
                break
            (_, precision, _), term, mask = best
            terms.append(term)
        if not terms and precision < 1.0:
            break
        new_cover = mask & uncovered
        if not new_cover.any():
            break
        clauses.append(tuple(terms))
        uncovered &= ~mask
    clauses = _prune(clauses, X)
    rs = RuleSet(tuple(clauses), 0.0, 0.0, max_clauses, max_terms)
    coverage, precision = _fidelity(rs.evaluate(X), labels)
    note = "" if clauses else "no rule met the coverage requirement"
    return RuleSet(tuple(clauses), coverage, precision, max_clauses, max_terms, note)


@dataclass(frozen=True)
class SubgroupStats:
    """Prevalence and mean loss inside a subgroup, per domain.

    Loss fields are ``None`` when the subgroup is empty in that domain.
    """

    prevalence_source: float
    prevalence_target: float
    loss_source: float | None
    loss_target: float | None
    decay: float | None
    n_source: int = 0
    n_target: int = 0
    note: str = ""

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def subgroup_stats(detector: Callable, eval_source: Dataset, eval_target: Dataset) -> SubgroupStats:
    """Empirical prevalence, in-group mean loss and its change across domains."""
    h0 = np.asarray(detector(eval_source.features)).astype(bool)
    h1 = np.asarray(detector(eval_target.features)).astype(bool)
    p0, p1 = float(h0.mean()), float(h1.mean())
    l0 = float(eval_source.loss[h0].mean()) if h0.any() else None
    l1 = float(eval_target.loss[h1].mean()) if h1.any() else None
    decay = None if (l0 is None or l1 is None) else l1 - l0
    note = "" if decay is not None else "subgroup is empty in at least one domain"
    return SubgroupStats(p0, p1, l0, l1, decay, int(h0.sum()), int(h1.sum()), note)
