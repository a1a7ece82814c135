"""One-step corrected estimators of the conditional expected exceedence.

Each estimator returns an :class:`MceeResult` holding the corrected estimate
as a ratio ``numerator / denominator``, the plug-in estimate and the per-row
influence contributions used by the multiplier bootstrap.

Influence convention
--------------------
Contributions are aligned to the pooled evaluation rows, source rows first.
A sample mean over the ``n_d`` rows of domain ``d`` contributes
``(n / n_d) * (g_i - mean(g))`` for each of its rows, where ``n`` is the total
row count, so that ``estimate - truth`` is approximately the plain average of
the contributions and its variance is ``sum(psi**2) / n**2``.

Exceedence convention
---------------------
The tolerance ``tau`` enters every numerator as ``- tau * P[h]`` where ``P[h]``
is the denominator, so each estimate equals a difference of conditional mean
losses minus ``tau``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, threshold_predictions
from .errors import DegenerateDetectorError
from .nuisance import conditional_zero_one_loss, hybrid_rows

AGG_OUTCOME = "agg_outcome"
DETAIL_OUTCOME = "detail_outcome"
AGG_COVARIATE = "agg_covariate"
DETAIL_COVARIATE = "detail_covariate"

_PAIR_BLOCK = 1 << 19


@dataclass(frozen=True, eq=False)
class MceeResult:
    """Corrected estimate with its linearization.

    Attributes
    ----------
    estimate : float
        ``numerator / denominator``.
    plugin_estimate : float
        Estimate with fitted nuisances substituted and no correction terms.
    influence : ndarray
        Per-row contributions over the pooled evaluation rows.
    terms : dict
        Named components of the numerator, for auditing.
    """

    kind: str
    estimate: float
    plugin_estimate: float
    numerator: float
    denominator: float
    influence: np.ndarray
    n_source: int
    n_target: int
    tau: float = 0.0
    detector: object = None
    terms: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.n_source + self.n_target

    @property
    def standard_error(self) -> float:
        return float(math.sqrt(float(self.influence @ self.influence)) / self.n)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "estimate": float(self.estimate),
            "plugin_estimate": float(self.plugin_estimate),
            "numerator": float(self.numerator),
            "denominator": float(self.denominator),
            "standard_error": self.standard_error,
            "n_source": int(self.n_source),
            "n_target": int(self.n_target),
            "tau": float(self.tau),
            "terms": {k: float(v) for k, v in self.terms.items()},
        }


def _mean(a) -> float:
    return math.fsum(np.asarray(a, dtype=float)) / len(a)


def _pooled(src: np.ndarray | None, tgt: np.ndarray | None, n0: int, n1: int) -> np.ndarray:
    """Scale centered per-domain linearizations onto the pooled row index."""
    n = n0 + n1
    parts = []
    if n0:
        parts.append((n / n0) * (src - src.mean()))
    if n1:
        parts.append((n / n1) * (tgt - tgt.mean()))
    return np.concatenate(parts)


def _require(prevalence: float, what: str):
    if not prevalence > 0:
        raise DegenerateDetectorError(f"detector flags no {what} evaluation rows")


# ---------------------------------------------------------------------------
# V-statistics


@dataclass(frozen=True, eq=False)
class VStatKernel:
    """Pairwise kernel over a fixed set of rows, evaluated in blocks.

    Parameters
    ----------
    fn : callable
        ``fn(I, J)`` returns the ``len(I) x len(J)`` matrix of kernel values
        for row index arrays ``I`` (first argument) and ``J`` (second).
    symmetrized : bool
        If True the kernel is replaced by ``(v(i, j) + v(j, i)) / 2``.
    """

    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    symmetrized: bool = False

    def block(self, I, J) -> np.ndarray:
        I = np.asarray(I, dtype=np.int64)
        J = np.asarray(J, dtype=np.int64)
        K = np.asarray(self.fn(I, J), dtype=float)
        if self.symmetrized:
            K = 0.5 * (K + np.asarray(self.fn(J, I), dtype=float).T)
        return K

    def __call__(self, i: int, j: int) -> float:
        return float(self.block([i], [j])[0, 0])


def vstat_components(kernel: VStatKernel, n: int, groups: Sequence | None = None,
                     block_pairs: int = _PAIR_BLOCK, weights: Sequence | None = None):
    """Mean over all ordered pairs plus per-row first-order projections.

    Parameters
    ----------
    kernel : VStatKernel
    n : int
        Number of rows.
    groups : array of shape (n,), optional
        If given, the kernel is known to vanish whenever the two rows carry
        different group labels, and only within-group pairs are evaluated.
    block_pairs : int
        Approximate number of kernel values computed per block.
    weights : array of shape (n,), optional
        Row multiplicities. Row ``i`` then stands for ``weights[i]`` identical
        rows of a sample of size ``N = sum(weights)``, which lets data with
        repeated rows be handled through its distinct rows only.

    Returns
    -------
    value : float
        ``sum_ij w_i w_j v(i, j) / N**2`` (``N = n`` without weights).
    row_means, col_means : ndarray of shape (n,)
        ``sum_j w_j v(i, j) / N`` and ``sum_j w_j v(j, i) / N``.
    """
    if n < 1:
        raise ValueError("a V-statistic needs at least one row")
    if weights is not None:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(w < 0) or w.sum() <= 0:
            raise ValueError("weights must be nonnegative with one entry per row")
        return _weighted_vstat(kernel, n, groups, block_pairs, w)
    if groups is None:
        members = [np.arange(n)]
    else:
        g = np.asarray(groups)
        members = [np.flatnonzero(g == v) for v in np.unique(g)]
    rows = np.zeros(n)
    cols = np.zeros(n)
    partial = []
    for J in members:
        step = max(1, block_pairs // max(J.size, 1))
        for start in range(0, J.size, step):
            I = J[start:start + step]
            K = kernel.block(I, J)
            r = K.sum(axis=1)
            rows[I] += r
            cols[J] += K.sum(axis=0)
            partial.append(math.fsum(r))
    value = math.fsum(partial) / (n * n)
    return value, rows / n, cols / n


def _weighted_vstat(kernel, n, groups, block_pairs, w):
    members = [np.arange(n)] if groups is None else [
        np.flatnonzero(np.asarray(groups) == v) for v in np.unique(groups)]
    N = w.sum()
    rows = np.zeros(n)
    cols = np.zeros(n)
    partial = []
    for J in members:
        step = max(1, block_pairs // max(J.size, 1))
        for start in range(0, J.size, step):
            I = J[start:start + step]
            K = kernel.block(I, J)
            r = K @ w[J]
            rows[I] += r
            cols[J] += w[I] @ K
            partial.append(math.fsum(w[I] * r))
    return math.fsum(partial) / (N * N), rows / N, cols / N


def vstatistic(kernel: VStatKernel, rows, groups: Sequence | None = None) -> float:
    """Exact V-statistic: the kernel mean over all ordered pairs, including ``i = j``.

    ``rows`` is either the row count or a sized collection of rows.
    """
    n = int(rows) if np.isscalar(rows) else len(rows)
    return vstat_components(kernel, n, groups)[0]


def vstatistic_naive(v: Callable[[int, int], float], n: int) -> float:
    """Reference double loop over ordered pairs, kept for testing."""
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += v(i, j)
    return total / (n * n)


# ---------------------------------------------------------------------------
# Aggregate outcome


def plugin_agg_outcome(eval_target: Dataset, z0: Callable, detector: Callable, tau: float) -> float:
    X = eval_target.features
    h = detector(X).astype(float)
    _require(h.sum(), "target")
    return _mean((eval_target.loss - z0(X) - tau) * h) / _mean(h)


def mcee_agg_outcome(eval_source: Dataset, eval_target: Dataset, z0: Callable, ratio: Callable,
                     detector: Callable, tau: float) -> MceeResult:
    """Corrected estimate of ``E1[loss - Z0 | A] - tau``.

    The numerator is ``P1[loss*h] - P1[Z0*h] - P0[ratio*h*(loss - Z0)] - tau*P1[h]``
    and the denominator ``P1[h]``; the source term removes the first-order
    bias of ``Z0`` on the flagged region.
    """
    Xs, Xt = eval_source.features, eval_target.features
    h0 = detector(Xs).astype(float)
    h1 = detector(Xt).astype(float)
    a1 = _mean(h1)
    _require(a1, "target")
    l1 = eval_target.loss
    z0t = z0(Xt)
    c_src = ratio(Xs) * h0 * (eval_source.loss - z0(Xs))
    L1 = _mean(l1 * h1)
    Z1 = _mean(z0t * h1)
    C0 = _mean(c_src)
    core = L1 - Z1 - C0
    numerator = core - tau * a1
    estimate = numerator / a1
    plugin = (L1 - Z1 - tau * a1) / a1
    tgt = (l1 * h1 - z0t * h1 - (core / a1) * h1) / a1
    src = -c_src / a1
    psi = _pooled(src, tgt, eval_source.n, eval_target.n)
    return MceeResult(AGG_OUTCOME, estimate, plugin, numerator, a1, psi, eval_source.n,
                      eval_target.n, tau, detector,
                      {"target_loss": L1, "target_z0": Z1, "source_correction": C0,
                       "prevalence_target": a1})


# ---------------------------------------------------------------------------
# Detailed outcome


@dataclass(frozen=True, eq=False)
class OutcomeShiftParts:
    """Fitted pieces the detailed outcome estimator evaluates.

    Attributes
    ----------
    model : callable
        Frozen model scores on full feature rows.
    bin_codes : callable
        Source outcome bin index of full feature rows.
    ps_prob : callable
        ``ps_prob(x_s, codes)``: target P(Y=1 | x_s, bin).
    pi_v : callable
        ``pi_v(x_s, x_rest, codes)``: conditional density ratio.
    bin_freq : ndarray
        Reference frequency of each bin index.
    columns, complement : tuple of int
        Column indices of ``x_s`` and of the remaining features.
    """

    model: Callable
    bin_codes: Callable
    ps_prob: Callable
    pi_v: Callable
    bin_freq: np.ndarray
    columns: tuple
    complement: tuple

    @classmethod
    def from_nuisance(cls, shifted, vratio) -> "OutcomeShiftParts":
        return cls(shifted.outcome.model, shifted.outcome.bin_codes, shifted.prob, vratio,
                   np.asarray(vratio.bin_freq), tuple(shifted.subset.column_indices),
                   tuple(vratio.complement))


def _outcome_shift_kernel(parts: OutcomeShiftParts, X, y, codes, p_s, rho, detector):
    d = X.shape[1]
    s_cols, c_cols = list(parts.columns), list(parts.complement)

    def fn(I, J):
        ni, nj = I.size, J.size
        Ii = np.repeat(I, nj)
        Jj = np.tile(J, ni)
        out = np.zeros(ni * nj)
        same = codes[Ii] == codes[Jj]
        if not same.any():
            return out.reshape(ni, nj)
        Ii, Jj = Ii[same], Jj[same]
        H = hybrid_rows(X[Ii], X[Jj], s_cols, c_cols, d)
        m = codes[Ii]
        match = parts.bin_codes(H) == m
        val = np.zeros(Ii.size)
        if match.any():
            Hm, im, mm = H[match], Ii[match], m[match]
            pred = parts.model(Hm)
            hh = detector(Hm).astype(float)
            lab = threshold_predictions(pred)
            resid = (lab != y[im]).astype(float) - conditional_zero_one_loss(pred, p_s[im])
            w = parts.pi_v(X[im][:, s_cols], Hm[:, c_cols], mm) / rho[im]
            val[match] = w * hh * resid
        out[same] = val
        return out.reshape(ni, nj)

    return VStatKernel(fn)


def plugin_detailed_outcome(eval_target: Dataset, zs: Callable, detector: Callable,
                            tau: float) -> float:
    return plugin_agg_outcome(eval_target, zs, detector, tau)


def mcee_detailed_outcome(eval_target: Dataset, parts: OutcomeShiftParts, detector: Callable,
                          tau: float) -> MceeResult:
    """Corrected estimate of ``E1[loss - Zs | A] - tau`` for a feature subset.

    ``E1[Zs * h]`` is estimated by the average of ``Zs * h`` plus the V-statistic
    with kernel

        v(i, j) = 1{bin_j = bin_i} / rho(bin_i) * 1{bin(hyb_ij) = bin_i}
                  * pi_v(x_s_i, x_rest_j, bin_i) * h(hyb_ij)
                  * (loss(y_i, f(hyb_ij)) - E_ps[loss(Y, f(hyb_ij)) | x_s_i, bin_i])

    where ``hyb_ij`` takes ``x_s`` from row ``i`` and the other features from
    row ``j``. The first factor turns the average over ``j`` into an average
    over rows sharing row ``i``'s bin. When ``x_s`` is every feature the hybrid
    is row ``i`` itself and the V-statistic collapses to the single average of
    ``(loss - Zs) * h``.
    """
    X = eval_target.features
    y = eval_target.outcome
    n = eval_target.n
    loss = eval_target.loss
    h = detector(X).astype(float)
    a1 = _mean(h)
    _require(a1, "target")
    codes = np.asarray(parts.bin_codes(X), dtype=np.int64)
    p_s = parts.ps_prob(X[:, list(parts.columns)], codes)
    zs = conditional_zero_one_loss(parts.model(X), p_s)
    a = zs * h
    if not parts.complement:
        single = (loss - zs) * h
        V = _mean(single)
        dV = single - V
    else:
        freq = np.asarray(parts.bin_freq, dtype=float)
        rho = freq[np.clip(codes, 0, freq.size - 1)]
        local = np.bincount(codes, minlength=codes.max() + 1) / n
        rho = np.where(rho > 0, rho, local[codes])
        # The kernel depends on a row only through (x, y), so repeated rows
        # are evaluated once and weighted by their multiplicity.
        _, first, inverse, counts = np.unique(np.column_stack([X, y]), axis=0,
                                              return_index=True, return_inverse=True,
                                              return_counts=True)
        inverse = np.ravel(inverse)
        if first.size < n:
            U = first
            kernel = _outcome_shift_kernel(parts, X[U], y[U], codes[U], p_s[U], rho[U],
                                           detector)
            V, row_u, col_u = vstat_components(kernel, U.size, groups=codes[U],
                                               weights=counts)
            row_m, col_m = row_u[inverse], col_u[inverse]
        else:
            kernel = _outcome_shift_kernel(parts, X, y, codes, p_s, rho, detector)
            V, row_m, col_m = vstat_components(kernel, n, groups=codes)
        dV = (row_m - V) + (col_m - V)
    A = _mean(a)
    L1 = _mean(loss * h)
    shifted_loss = A + V
    core = L1 - shifted_loss
    numerator = core - tau * a1
    estimate = numerator / a1
    plugin = (L1 - A - tau * a1) / a1
    psi = ((loss * h - L1) - (a - A) - dV - (core / a1) * (h - a1)) / a1
    return MceeResult(DETAIL_OUTCOME, estimate, plugin, numerator, a1, psi, 0, n, tau,
                      detector,
                      {"target_loss": L1, "shifted_loss_plugin": A, "vstatistic": V,
                       "prevalence_target": a1})


# ---------------------------------------------------------------------------
# Covariate estimators


def plugin_agg_covariate(eval_source: Dataset, eval_target: Dataset, z0: Callable,
                         detector: Callable, tau: float) -> float:
    Xs, Xt = eval_source.features, eval_target.features
    h0 = detector(Xs).astype(float)
    h1 = detector(Xt).astype(float)
    _require(h0.sum(), "source")
    _require(h1.sum(), "target")
    return _mean(z0(Xt) * h1) / _mean(h1) - _mean(eval_source.loss * h0) / _mean(h0) - tau


def mcee_agg_covariate(eval_source: Dataset, eval_target: Dataset, z0: Callable, ratio: Callable,
                       detector: Callable, tau: float) -> MceeResult:
    """Corrected estimate of ``E1[Z0 | A] - E0[loss | A] - tau``.

    Expressed over the source prevalence ``a0 = P0[h]``: the numerator is
    ``(a0/a1) * (P1[Z0*h] + P0[ratio*h*(loss - Z0)]) - P0[loss*h] - tau*a0``
    and the denominator is ``a0``.
    """
    Xs, Xt = eval_source.features, eval_target.features
    h0 = detector(Xs).astype(float)
    h1 = detector(Xt).astype(float)
    a0, a1 = _mean(h0), _mean(h1)
    _require(a0, "source")
    _require(a1, "target")
    l0 = eval_source.loss
    z0t = z0(Xt)
    zt = z0t * h1
    c_src = ratio(Xs) * h0 * (l0 - z0(Xs))
    Z1, C0, B0 = _mean(zt), _mean(c_src), _mean(l0 * h0)
    scale = a0 / a1
    numerator = scale * Z1 + scale * C0 - B0 - tau * a0
    estimate = numerator / a0
    plugin = Z1 / a1 - B0 / a0 - tau
    first = (Z1 + C0) / a1
    tgt = (zt - first * h1) / a1
    src = c_src / a1 - (l0 * h0 - (B0 / a0) * h0) / a0
    psi = _pooled(src, tgt, eval_source.n, eval_target.n)
    return MceeResult(AGG_COVARIATE, estimate, plugin, numerator, a0, psi, eval_source.n,
                      eval_target.n, tau, detector,
                      {"target_z0": scale * Z1, "source_correction": scale * C0,
                       "source_loss": -B0, "prevalence_source": a0, "prevalence_target": a1})


def plugin_detailed_covariate(eval_source: Dataset, eval_target: Dataset, z0: Callable,
                              ratio_s: Callable, detector: Callable, tau: float) -> float:
    Xs, Xt = eval_source.features, eval_target.features
    h0 = detector(Xs).astype(float)
    h1 = detector(Xt).astype(float)
    _require(h0.sum(), "source")
    _require(h1.sum(), "target")
    rs = ratio_s(Xs)
    shifted_prev = _mean(rs * h0) / _mean(rs)
    return (_mean(z0(Xt) * h1) / _mean(h1)
            - _mean(rs * eval_source.loss * h0) / _mean(rs) / shifted_prev - tau)


def mcee_detailed_covariate(eval_source: Dataset, eval_target: Dataset, z0: Callable,
                            ratio: Callable, ratio_s: Callable, zbar: Callable,
                            detector: Callable, tau: float) -> MceeResult:
    """Corrected estimate of ``E1[Z0 | A] - Es[loss | A] - tau`` for a subset.

    ``Es`` is the distribution with the target law of ``x_s`` and the source
    law of the remaining features given ``x_s``. ``zbar(x)`` estimates the
    source mean of ``loss * h`` given ``x_s``. With ``a0 = P0[h]``,
    ``cA = a0 / P1[h]`` and ``cs = a0 / Es[h]`` (``Es[h]`` by self-normalized
    importance weighting), the numerator is the sum of

    * ``cA * P1[Z0*h]``
    * ``-cs * P0[ratio_s*loss*h]``
    * ``cA * P0[ratio*h*(loss - Z0)]``
    * ``cs * P0[ratio_s*zbar]``
    * ``-cs * P1[zbar]``

    minus ``tau * a0``, and the denominator is ``a0``. With ``ratio_s = 1``
    and constant ``zbar`` this reduces to :func:`mcee_agg_covariate`.
    """
    Xs, Xt = eval_source.features, eval_target.features
    h0 = detector(Xs).astype(float)
    h1 = detector(Xt).astype(float)
    a0, a1 = _mean(h0), _mean(h1)
    _require(a0, "source")
    _require(a1, "target")
    l0 = eval_source.loss
    r = ratio(Xs)
    rs = ratio_s(Xs)
    zb0 = zbar(Xs)
    zb1 = zbar(Xt)
    zt = z0(Xt) * h1
    c_src = r * h0 * (l0 - z0(Xs))
    Z1, C0 = _mean(zt), _mean(c_src)
    G0, D0 = _mean(rs), _mean(rs * h0)
    _require(D0, "importance-weighted source")
    E0 = _mean(rs * l0 * h0)
    F0 = _mean(rs * zb0)
    K1 = _mean(zb1)
    cA = a0 / a1
    cs = a0 * G0 / D0
    t1, t2, t3, t4, t5 = cA * Z1, -cs * E0, cA * C0, cs * F0, -cs * K1
    numerator = t1 + t2 + t3 + t4 + t5 - tau * a0
    estimate = numerator / a0
    plugin = Z1 / a1 - E0 / D0 - tau
    first = (Z1 + C0) / a1
    second = E0 - F0 + K1
    cg = G0 / D0
    tgt = (zt - first * h1) / a1 - cg * zb1
    src = c_src / a1 - cg * (rs * l0 * h0 - rs * zb0) - second * (rs - cg * rs * h0) / D0
    psi = _pooled(src, tgt, eval_source.n, eval_target.n)
    return MceeResult(DETAIL_COVARIATE, estimate, plugin, numerator, a0, psi, eval_source.n,
                      eval_target.n, tau, detector,
                      {"target_z0": t1, "shifted_source_loss": t2, "source_correction": t3,
                       "shifted_zbar_source": t4, "shifted_zbar_target": t5,
                       "prevalence_source": a0, "prevalence_target": a1,
                       "prevalence_shifted": D0 / G0})


def plugin_mcee(kind: str, **kw) -> float:
    """Plug-in estimate for one of the four kinds.

    Keyword arguments are those of the matching ``plugin_*`` function.
    """
    fns = {
        AGG_OUTCOME: plugin_agg_outcome,
        DETAIL_OUTCOME: plugin_detailed_outcome,
        AGG_COVARIATE: plugin_agg_covariate,
        DETAIL_COVARIATE: plugin_detailed_covariate,
    }
    return fns[kind](**kw)
