"""Cross-validated learners for nuisance functions.

Two model families are available:

* ``linear``: ridge-penalized least squares, or ridge-penalized logistic
  regression for binary labels, fitted on standardized features.
* ``boosted_stumps``: gradient boosting with depth-one trees. Regression uses
  squared loss; classification uses logistic loss with Newton leaf values.
  Split thresholds are drawn from per-feature quantiles of the training data,
  and a value equal to a threshold is routed to the right child.

:func:`fit_regressor` and :func:`fit_prob_classifier` pick a candidate from a
small grid by K-fold cross-validation and refit it on all rows.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.special import expit

from .errors import DegenerateLabelError, InsufficientDataError, ShapeError, ValidationError

MODEL_FORMAT = "shiftdiag.model"
MODEL_FORMAT_VERSION = 1

#: Probabilities are clamped to this interval before computing log-loss.
LOGLOSS_CLAMP = 1e-6
#: Predicted probabilities are kept this far from 0 and 1.
_PROB_EPS = 1e-15
_MAX_BINS = 64

DEFAULT_GRID: tuple[tuple[str, dict], ...] = (
    ("linear", {"ridge": 1e-4}),
    ("linear", {"ridge": 1e-2}),
    ("linear", {"ridge": 1.0}),
    ("boosted_stumps", {"rounds": 50, "shrinkage": 0.1}),
    ("boosted_stumps", {"rounds": 200, "shrinkage": 0.1}),
    ("boosted_stumps", {"rounds": 50, "shrinkage": 0.3}),
    ("boosted_stumps", {"rounds": 200, "shrinkage": 0.3}),
)


@dataclass(frozen=True)
class CvConfig:
    """Cross-validation settings.

    Parameters
    ----------
    folds : int
        Number of folds, at least 2.
    grid : tuple of (kind, params)
        Candidates in priority order; ties in CV score go to the earlier one.
    seed : int
        Seed for the fold assignment.
    """

    folds: int = 5
    grid: tuple = DEFAULT_GRID
    seed: int = 0

    def __post_init__(self):
        if self.folds < 2:
            raise ValidationError("cross-validation needs at least 2 folds")
        if not self.grid:
            raise ValidationError("candidate grid is empty")
        for kind, params in self.grid:
            if kind not in ("linear", "boosted_stumps"):
                raise ValidationError(f"unknown learner kind {kind!r}")
            if kind == "boosted_stumps" and (
                int(params["rounds"]) < 1 or not 0 < float(params["shrinkage"]) <= 1
            ):
                raise ValidationError(f"bad boosting parameters {params}")

    def with_seed(self, seed: int) -> "CvConfig":
        return CvConfig(self.folds, self.grid, seed)


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass(frozen=True, eq=False)
class LinearParams:
    """Affine score ``intercept + X @ coef`` in the original feature scale."""

    intercept: float
    coef: np.ndarray

    def score(self, X: np.ndarray) -> np.ndarray:
        return self.intercept + X @ self.coef

    def to_dict(self) -> dict:
        return {"intercept": float(self.intercept), "coef": [float(c) for c in self.coef]}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearParams":
        return cls(float(d["intercept"]), np.asarray(d["coef"], dtype=float))


@dataclass(frozen=True, eq=False)
class StumpParams:
    """Additive ensemble of stumps.

    Stump ``t`` adds ``left[t]`` when ``X[:, feature[t]] < threshold[t]`` and
    ``right[t]`` otherwise. Stored leaf values already include the shrinkage
    factor, which is kept for the record.
    """

    base: float
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    shrinkage: float
    _tables: dict = field(default=None, repr=False)

    def __post_init__(self):
        # Collapse the stumps into one step function per feature so that
        # evaluation is a sorted lookup instead of a loop over stumps.
        tables = {}
        feature = np.asarray(self.feature, dtype=np.int64)
        for j in np.unique(feature):
            sel = np.flatnonzero(feature == j)
            order = sel[np.argsort(self.threshold[sel], kind="stable")]
            thr = np.asarray(self.threshold)[order]
            steps = np.asarray(self.right)[order] - np.asarray(self.left)[order]
            cum = np.concatenate([[0.0], np.cumsum(steps)])
            tables[int(j)] = (thr, cum, float(np.sum(np.asarray(self.left)[sel])))
        object.__setattr__(self, "_tables", tables)

    @property
    def n_stumps(self) -> int:
        return int(len(self.feature))

    def score(self, X: np.ndarray) -> np.ndarray:
        out = np.full(X.shape[0], float(self.base))
        for j, (thr, cum, left_total) in self._tables.items():
            out += left_total + cum[np.searchsorted(thr, X[:, j], side="right")]
        return out

    def to_dict(self) -> dict:
        return {
            "base": float(self.base),
            "shrinkage": float(self.shrinkage),
            "stumps": [
                [int(f), float(t), float(a), float(b)]
                for f, t, a, b in zip(self.feature, self.threshold, self.left, self.right)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "StumpParams":
        s = np.asarray(d["stumps"], dtype=float).reshape(-1, 4)
        return cls(
            float(d["base"]),
            s[:, 0].astype(np.int64),
            s[:, 1].copy(),
            s[:, 2].copy(),
            s[:, 3].copy(),
            float(d["shrinkage"]),
        )


# ---------------------------------------------------------------------------
# Models


@dataclass(frozen=True, eq=False)
class RegressionModel:
    """A fitted real-valued predictor."""

    kind: str
    params: Any
    n_features: int
    training_meta: dict = field(default_factory=dict)

    task = "regression"

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1 and self.n_features == 1:
            X = X[:, None]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise ShapeError(
                f"model expects {self.n_features} columns, got array of shape {X.shape}"
            )
        return X

    def score(self, X) -> np.ndarray:
        return self.params.score(self._check(X))

    def predict(self, X) -> np.ndarray:
        return self.score(X)

    __call__ = predict

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_FORMAT_VERSION,
            "task": self.task,
            "kind": self.kind,
            "n_features": self.n_features,
            "params": self.params.to_dict(),
            "training_meta": _jsonable(self.training_meta),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass(frozen=True, eq=False)
class ProbModel(RegressionModel):
    """A fitted classifier; ``predict`` returns P(label = 1) via the logistic link."""

    task = "classification"

    def predict(self, X) -> np.ndarray:
        return np.clip(expit(self.score(X)), _PROB_EPS, 1.0 - _PROB_EPS)

    __call__ = predict


def predict(model: RegressionModel, X) -> np.ndarray:
    """Evaluate a fitted model on a feature matrix."""
    return model.predict(X)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def model_from_dict(d: dict) -> RegressionModel:
    """Rebuild a model from :meth:`RegressionModel.to_dict` output."""
    if d.get("format") != MODEL_FORMAT:
        raise ValidationError("not a serialized model")
    if int(d.get("version", -1)) != MODEL_FORMAT_VERSION:
        raise ValidationError(f"unsupported model format version {d.get('version')}")
    params = (LinearParams if d["kind"] == "linear" else StumpParams).from_dict(d["params"])
    cls = ProbModel if d["task"] == "classification" else RegressionModel
    return cls(d["kind"], params, int(d["n_features"]), dict(d.get("training_meta", {})))


def model_from_json(text: str) -> RegressionModel:
    return model_from_dict(json.loads(text))


# ---------------------------------------------------------------------------
# Base fitters


def _standardize(X, w):
    W = w.sum()
    mean = (w @ X) / W
    var = (w @ (X - mean) ** 2) / W
    scale = np.sqrt(var)
    scale[scale <= 1e-12 * (1.0 + np.abs(mean))] = 1.0
    return mean, scale


def _fit_ridge(X, y, w, ridge) -> LinearParams:
    mean, scale = _standardize(X, w)
    W = w.sum()
    Z = (X - mean) / scale
    ybar = float(w @ y) / W
    A = (Z.T * w) @ Z / W + ridge * np.eye(X.shape[1])
    b = (Z.T * w) @ (y - ybar) / W
    beta = np.linalg.solve(A, b)
    coef = beta / scale
    return LinearParams(ybar - float(mean @ coef), coef)


def _logistic_objective(F, y, w, W):
    return float(w @ (np.logaddexp(0.0, F) - y * F)) / W


def _fit_logistic(X, y, w, ridge, max_iter=100, tol=1e-10) -> LinearParams:
    mean, scale = _standardize(X, w)
    W = w.sum()
    Z = np.hstack([np.ones((X.shape[0], 1)), (X - mean) / scale])
    pen = np.full(Z.shape[1], ridge)
    pen[0] = 0.0
    prev = float(w @ y) / W
    theta = np.zeros(Z.shape[1])
    theta[0] = np.log(prev / (1 - prev))

    def objective(t):
        return _logistic_objective(Z @ t, y, w, W) + 0.5 * float(pen @ t**2)

    obj = objective(theta)
    for _ in range(max_iter):
        p = expit(Z @ theta)
        grad = Z.T @ (w * (p - y)) / W + pen * theta
        hess = (Z.T * (w * p * (1 - p))) @ Z / W + np.diag(pen + 1e-12)
        try:
            step = np.linalg.solve(hess, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(hess, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = theta - t * step
            new = objective(cand)
            if new <= obj or t < 1e-10:
                break
            t *= 0.5
        converged = np.max(np.abs(cand - theta)) < tol or obj - new < tol * 1e-2
        theta, obj = cand, min(new, obj)
        if converged:
            break
    coef = theta[1:] / scale
    return LinearParams(float(theta[0] - mean @ coef), coef)


def _bin_features(X, max_bins=_MAX_BINS):
    """Quantile cut points per column and the matching integer codes.

    Cut points are observed values strictly above the column minimum, so every
    threshold lies inside the training range and splits off a nonempty set.
    """
    n, d = X.shape
    cuts, codes = [], np.empty((n, d), dtype=np.int64)
    qs = np.arange(1, max_bins) / max_bins
    for j in range(d):
        x = X[:, j]
        c = np.unique(np.quantile(x, qs, method="lower"))
        c = c[c > x.min()]
        if c.size == 0:
            u = np.unique(x)
            c = u[1:2]
        cuts.append(c)
        codes[:, j] = np.searchsorted(c, x, side="right")
    return cuts, codes


def _refine_split(x, code, k, g, h, lam, G_tot, H_tot, thr, gain, vl, vr):
    """Exact search over observed values in the two bins beside a histogram cut.

    The histogram search only sees bin edges. Rows in bins ``k`` and ``k + 1``
    are sorted and every distinct value there is tried as a threshold (values
    at or above it go right), so a split can land on the actual gap in the
    data. Returns the threshold and leaf values; the edge itself is kept when
    nothing beats it.
    """
    win = (code == k) | (code == k + 1)
    below = code < k
    G0, H0 = float(g[below].sum()), float(h[below].sum())
    xw = x[win]
    order = np.argsort(xw, kind="stable")
    xs, gs, hs = xw[order], g[win][order], h[win][order]
    GL = G0 + np.cumsum(gs)[:-1]
    HL = H0 + np.cumsum(hs)[:-1]
    step = xs[1:] > xs[:-1]  # threshold xs[i + 1] separates rows 0..i from the rest
    GR, HR = G_tot - GL, H_tot - HL
    ok = step & (HL > 1e-12) & (HR > 1e-12)
    if not ok.any():
        return thr, vl, vr
    cand = np.where(ok, GL**2 / np.where(ok, HL + lam, 1.0)
                    + GR**2 / np.where(ok, HR + lam, 1.0), -np.inf)
    i = int(np.argmax(cand))
    if not cand[i] > gain * (1 + 1e-12):
        return thr, vl, vr
    return float(xs[i + 1]), -GL[i] / (HL[i] + lam), -GR[i] / (HR[i] + lam)


def _boost(X, y, w, rounds, shrinkage, task, stages=(), X_val=None):
    """Fit boosted stumps; optionally return staged scores on ``X_val``.

    Returns
    -------
    params : StumpParams
    staged : dict
        Map from each requested stage to validation scores after that many
        rounds (empty when ``X_val`` is None).
    """
    n, d = X.shape
    W = w.sum()
    cuts, codes = _bin_features(X)
    if task == "classification":
        prev = float(w @ y) / W
        base = float(np.log(prev / (1 - prev)))
        lam = 1e-8
    else:
        base = float(w @ y) / W
        lam = 0.0
    F = np.full(n, base)
    feats, thrs, lefts, rights = [], [], [], []
    staged = {}
    val_score = None if X_val is None else np.full(X_val.shape[0], base)
    stage_set = set(int(s) for s in stages)

    def loss_of(F_):
        if task == "classification":
            return _logistic_objective(F_, y, w, W)
        r = y - F_
        return float(w @ (r * r)) / W

    current = loss_of(F)
    for t in range(1, rounds + 1):
        if task == "classification":
            p = expit(F)
            g = w * (p - y)
            h = w * p * (1 - p)
        else:
            g = w * (F - y)
            h = w
        G_tot, H_tot = g.sum(), h.sum()
        best = (0.0, -1, -1, 0.0, 0.0)
        for j in range(d):
            K = cuts[j].size
            if K == 0:
                continue
            G = np.bincount(codes[:, j], weights=g, minlength=K + 1)
            H = np.bincount(codes[:, j], weights=h, minlength=K + 1)
            GL = np.cumsum(G)[:-1]
            HL = np.cumsum(H)[:-1]
            GR = G_tot - GL
            HR = H_tot - HL
            ok = (HL > 1e-12) & (HR > 1e-12)
            if not ok.any():
                continue
            gain = np.where(ok, GL**2 / np.where(ok, HL + lam, 1.0) + GR**2 / np.where(ok, HR + lam, 1.0), -np.inf)
            k = int(np.argmax(gain))
            if gain[k] > best[0] * (1 + 1e-12) + 1e-300:
                best = (float(gain[k]), j, k, -GL[k] / (HL[k] + lam), -GR[k] / (HR[k] + lam))
        if best[1] < 0:
            # No split improves the fit; later stages equal the current one.
            for s in stage_set:
                if s >= t and val_score is not None:
                    staged[s] = val_score.copy()
            break
        gain_k, j, k, vl, vr = best
        thr, vl, vr = _refine_split(X[:, j], codes[:, j], k, g, h, lam, G_tot, H_tot,
                                    float(cuts[j][k]), gain_k, vl, vr)
        go_right = X[:, j] >= thr
        step = shrinkage
        while True:
            F_new = F + np.where(go_right, step * vr, step * vl)
            new = loss_of(F_new)
            if new <= current or step < 1e-12:
                break
            step *= 0.5
        if new > current:
            F_new, new, step = F, current, 0.0
        F, current = F_new, new
        feats.append(j)
        thrs.append(thr)
        lefts.append(step * vl)
        rights.append(step * vr)
        if val_score is not None:
            val_score += np.where(X_val[:, j] >= thr, step * vr, step * vl)
            if t in stage_set:
                staged[t] = val_score.copy()
    params = StumpParams(
        base,
        np.asarray(feats, dtype=np.int64),
        np.asarray(thrs, dtype=float),
        np.asarray(lefts, dtype=float),
        np.asarray(rights, dtype=float),
        float(shrinkage),
    )
    return params, staged


def _fit_linear(X, y, w, ridge, task):
    if task == "classification":
        return _fit_logistic(X, y, w, ridge)
    return _fit_ridge(X, y, w, ridge)


# ---------------------------------------------------------------------------
# Cross-validation


def _fold_ids(n, folds, seed, labels=None):
    rng = np.random.default_rng(seed)
    ids = np.empty(n, dtype=np.int64)
    if labels is None:
        groups = [np.arange(n)]
    else:
        groups = [np.flatnonzero(labels == c) for c in np.unique(labels)]
    offset = 0
    for g in groups:
        perm = g[rng.permutation(len(g))]
        ids[perm] = (np.arange(len(g)) + offset) % folds
        offset += len(g)
    return ids


def _cv_loss(task, y, w, score):
    if task == "classification":
        p = np.clip(expit(score), LOGLOSS_CLAMP, 1 - LOGLOSS_CLAMP)
        ll = -(y * np.log(p) + (1 - y) * np.log(1 - p))
        return float(w @ ll) / w.sum()
    r = y - score
    return float(w @ (r * r)) / w.sum()


def _cv_scores(X, y, w, cfg: CvConfig, task):
    labels = y.astype(np.int64) if task == "classification" else None
    ids = _fold_ids(X.shape[0], cfg.folds, cfg.seed, labels)
    scores = np.zeros(len(cfg.grid))
    by_shrink: dict[float, list[int]] = {}
    for c, (kind, params) in enumerate(cfg.grid):
        if kind == "boosted_stumps":
            by_shrink.setdefault(float(params["shrinkage"]), []).append(c)
    for k in range(cfg.folds):
        val = ids == k
        tr = ~val
        Xt, yt, wt = X[tr], y[tr], w[tr]
        Xv, yv, wv = X[val], y[val], w[val]
        if task == "classification" and (yt.min() == yt.max()):
            raise InsufficientDataError("a training fold contains a single class")
        for c, (kind, params) in enumerate(cfg.grid):
            if kind == "linear":
                prm = _fit_linear(Xt, yt, wt, float(params["ridge"]), task)
                scores[c] += _cv_loss(task, yv, wv, prm.score(Xv)) / cfg.folds
        for shrink, members in by_shrink.items():
            stages = [int(cfg.grid[c][1]["rounds"]) for c in members]
            _, staged = _boost(Xt, yt, wt, max(stages), shrink, task, stages, Xv)
            for c, s in zip(members, stages):
                scores[c] += _cv_loss(task, yv, wv, staged[s]) / cfg.folds
    return scores


def _fit_candidate(kind, params, X, y, w, task):
    if kind == "linear":
        return _fit_linear(X, y, w, float(params["ridge"]), task)
    prm, _ = _boost(X, y, w, int(params["rounds"]), float(params["shrinkage"]), task)
    return prm


def _prepare(X, y, sample_weight):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ShapeError(f"X has shape {X.shape} but y has {y.shape[0]} entries")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise ValidationError("learner inputs must be finite")
    if sample_weight is None:
        w = np.ones(y.shape[0])
    else:
        w = np.asarray(sample_weight, dtype=float).ravel()
        if w.shape != y.shape or np.any(w < 0) or not np.all(np.isfinite(w)) or w.sum() <= 0:
            raise ValidationError("sample weights must be finite, nonnegative and not all zero")
    return X, y, w


def _select_and_fit(X, y, w, cfg, task, cls):
    scores = _cv_scores(X, y, w, cfg, task)
    best = int(np.argmin(scores))  # first minimum, so ties follow grid order
    kind, params = cfg.grid[best]
    prm = _fit_candidate(kind, params, X, y, w, task)
    meta = {
        "cv_score": float(scores[best]),
        "cv_scores": [float(s) for s in scores],
        "candidate": [kind, dict(params)],
        "folds": cfg.folds,
        "seed": cfg.seed,
        "n_train": int(X.shape[0]),
    }
    return cls(kind, prm, X.shape[1], meta)


def fit_regressor(X, y, cfg: CvConfig = CvConfig(), sample_weight=None) -> RegressionModel:
    """Select a regressor by cross-validated squared error and refit it.

    Raises
    ------
    InsufficientDataError
        Fewer rows than folds.
    """
    X, y, w = _prepare(X, y, sample_weight)
    if X.shape[0] < cfg.folds:
        raise InsufficientDataError(f"{X.shape[0]} rows is fewer than {cfg.folds} folds")
    if np.ptp(y) == 0:
        prm = LinearParams(float(y[0]), np.zeros(X.shape[1]))
        meta = {"cv_score": 0.0, "candidate": ["constant", {}], "folds": cfg.folds,
                "seed": cfg.seed, "n_train": int(X.shape[0])}
        return RegressionModel("linear", prm, X.shape[1], meta)
    return _select_and_fit(X, y, w, cfg, "regression", RegressionModel)


def fit_prob_classifier(X, labels, cfg: CvConfig = CvConfig(), sample_weight=None) -> ProbModel:
    """Select a probabilistic classifier by cross-validated log-loss and refit it.

    Raises
    ------
    DegenerateLabelError
        Only one class is present.
    InsufficientDataError
        Fewer rows than folds, or a class has fewer rows than folds.
    """
    X, y, w = _prepare(X, labels, sample_weight)
    if not np.all((y == 0) | (y == 1)):
        raise ValidationError("labels must be 0 or 1")
    if y.min() == y.max():
        raise DegenerateLabelError("labels contain a single class")
    counts = np.bincount(y.astype(np.int64), minlength=2)
    if X.shape[0] < cfg.folds or counts.min() < cfg.folds:
        raise InsufficientDataError(
            f"need at least {cfg.folds} rows of each class, got {counts.tolist()}"
        )
    return _select_and_fit(X, y, w, cfg, "classification", ProbModel)


def fit_logistic(X, labels, ridge: float = 1e-6, sample_weight=None) -> ProbModel:
    """Plain ridge-logistic fit without model selection."""
    X, y, w = _prepare(X, labels, sample_weight)
    if y.min() == y.max():
        raise DegenerateLabelError("labels contain a single class")
    prm = _fit_logistic(X, y, w, ridge)
    return ProbModel("linear", prm, X.shape[1], {"ridge": ridge, "n_train": int(X.shape[0])})


def fit_boosted(X, y, rounds: int, shrinkage: float, task: str = "regression",
                sample_weight=None) -> RegressionModel:
    """Boosted stumps with fixed hyperparameters, no model selection."""
    X, y, w = _prepare(X, y, sample_weight)
    prm, _ = _boost(X, y, w, rounds, shrinkage, task)
    cls = ProbModel if task == "classification" else RegressionModel
    return cls("boosted_stumps", prm, X.shape[1], {"rounds": rounds, "shrinkage": shrinkage})


def boosting_loss_path(X, y, rounds: int, shrinkage: float, task: str = "regression",
                       sample_weight=None) -> np.ndarray:
    """Training loss after 0, 1, ..., ``rounds`` boosting rounds."""
    X, y, w = _prepare(X, y, sample_weight)
    prm, _ = _boost(X, y, w, rounds, shrinkage, task)
    W = w.sum()
    F = np.full(X.shape[0], prm.base)
    out = []
    for t in range(prm.n_stumps + 1):
        if t > 0:
            j = prm.feature[t - 1]
            F = F + np.where(X[:, j] >= prm.threshold[t - 1], prm.right[t - 1], prm.left[t - 1])
        if task == "classification":
            out.append(_logistic_objective(F, y, w, W))
        else:
            out.append(float(w @ (y - F) ** 2) / W)
    return np.asarray(out)
