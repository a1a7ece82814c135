"""Shared helpers for the test suite."""

from __future__ import annotations

import numpy as np
import pytest

from shiftdiag.data import SOURCE, TARGET, Dataset, compute_loss


def make_dataset(X, y, pred=None, domain=SOURCE, names=()):
    """Dataset with losses computed from ``pred`` (all 0.5 when omitted)."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    pred = np.full(X.shape[0], 0.5) if pred is None else pred
    return compute_loss(Dataset(X, y, domain, pred, None, tuple(names)))


def gaussian_pair(n=2000, d=2, shift=0.0, seed=0):
    """Source/target rows with a logistic outcome and a sign-of-x1 model."""
    rng = np.random.default_rng(seed)
    out = []
    for dom, mean in ((SOURCE, 0.0), (TARGET, shift)):
        X = rng.normal(mean, 1.0, size=(n, d))
        y = (rng.random(n) < 1 / (1 + np.exp(-X[:, 0]))).astype(int)
        pred = (X[:, 0] > 0).astype(float)
        out.append(make_dataset(X, y, pred, dom))
    return tuple(out)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
