"""Point estimates, standard errors and tests from forest weights.

Weights are held internally in the sum-to-one-per-arm scale. A *signed*
weight vector ``c`` for a contrast ``m - l`` is the arm ``m`` vector minus
the arm ``l`` vector, so ``point = c @ y``. Functions that take
``N2``-scaled weights (``w_hat``) expect ``N2 * c`` instead.

Two variance modes are available:

``"display"``
    The textbook two-term estimator applied to the signed weights over all
    honest rows, with k-NN moments conditional on the weight value.
``"arm"`` (default)
    The same two terms computed separately within each treatment arm (weights
    rescaled to the arm size, k-NN window ``ceil(2 sqrt(n_arm))``), with the
    conditional means centred at the arm mean of ``y`` and the arm variances
    summed. Unlike ``"display"`` it is invariant to shifting ``y`` by a constant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from . import _core
from .forest import WeightSet

VARIANCE_MODES = ("arm", "display")


@dataclass
class EffectEstimate:
    estimand: str
    point: float
    std_error: float
    p_value: float
    weights: np.ndarray = field(repr=False)  # signed; each arm sums to N2 in absolute value
    reliable: bool = True

    @property
    def t_stat(self) -> float:
        if self.std_error > 0:
            return self.point / self.std_error
        return 0.0 if self.point == 0 else math.copysign(math.inf, self.point)


@dataclass
class GroupSpec:
    """Grouping variable ``z`` over prediction points plus the conditioning treatment set."""

    z: np.ndarray
    delta: Sequence[int] = field(default_factory=tuple)

    def members(self, value, d_points: np.ndarray, M: int) -> np.ndarray:
        delta = tuple(self.delta) if len(self.delta) else tuple(range(M))
        sel = (np.asarray(self.z) == value) & np.isin(d_points, delta)
        return np.flatnonzero(sel)


def default_k(n: int) -> int:
    return max(1, min(n, int(math.ceil(2.0 * math.sqrt(n)))))


def p_value(point: float, se: float) -> float:
    """Two-sided normal p-value; with a zero standard error it is 1 for a zero point, else 0."""
    if se > 0:
        return float(2.0 * stats.norm.sf(abs(point) / se))
    return 1.0 if point == 0 else 0.0


def knn_conditional_moments(w, y, k: int):
    """k-NN mean and variance of ``y`` given the weight value ``w``.

    Neighbours of row ``i`` are the ``k`` rows closest in ``|w_j - w_i|``
    (ties by row index, row ``i`` included); the variance divides by ``k``.
    """
    w = np.ascontiguousarray(w, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if w.shape != y.shape:
        raise ValueError("weights and outcomes must have the same length")
    if k < 1 or k > w.size:
        raise ValueError(f"k must be in 1..{w.size}, got {k}")
    return _core.knn_moments(w, y, int(k))


def weights_variance(w_hat, y, k: Optional[int] = None) -> float:
    """Two-term variance estimate for ``(1/N2) * w_hat @ y`` (``w_hat`` scaled to sum to ``N2`` per arm)."""
    w_hat = np.asarray(w_hat, dtype=np.float64)
    n = w_hat.size
    k = default_k(n) if k is None else k
    mu, s2 = knn_conditional_moments(w_hat, y, k)
    a = w_hat * w_hat * s2
    term1 = a.sum() / (n * n)
    if n < 2:
        return float(max(term1, 0.0))
    b = w_hat * mu
    b = b - b.mean()
    term2 = (b @ b) / (n * (n - 1.0))
    return float(max(term1 + term2, 0.0))


def _blocks(c: np.ndarray, y: np.ndarray, d: Optional[np.ndarray], arms, mode: str):
    """Per-block ``(u, v, n)`` vectors whose Gram products give variances and covariances."""
    if mode == "display":
        n = c.size
        w = n * c
        mu, s2 = knn_conditional_moments(w, y, default_k(n))
        return [(w * np.sqrt(s2), w * mu, n)]
    if mode != "arm":
        raise ValueError(f"unknown variance mode {mode!r}; expected one of {VARIANCE_MODES}")
    if d is None:
        raise ValueError("arm-wise variance needs the honest treatments")
    out = []
    for a in arms:
        rows = np.flatnonzero(d == a)
        n = rows.size
        if n == 0:
            continue
        w = n * c[rows]
        ya = y[rows]
        mu, s2 = knn_conditional_moments(w, ya, default_k(n))
        out.append((w * np.sqrt(s2), w * (mu - ya.mean()), n))
    return out


def _gram(blocks_a, blocks_b) -> float:
    total = 0.0
    for (ua, va, n), (ub, vb, _) in zip(blocks_a, blocks_b):
        total += (ua @ ub) / (n * n)
        if n > 1:
            total += ((va - va.mean()) @ (vb - vb.mean())) / (n * (n - 1.0))
    return float(total)


def contrast_variance(c, y, d=None, arms: Sequence[int] = (), mode: str = "arm") -> float:
    """Variance of ``c @ y`` for internal-scale weights ``c`` over honest rows."""
    c = np.asarray(c, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if mode == "arm" and not len(arms):
        arms = np.unique(d[c != 0]) if d is not None else ()
    b = _blocks(c, y, None if d is None else np.asarray(d), arms, mode)
    return max(_gram(b, b), 0.0)


def contrast_covariance(cs: Sequence[np.ndarray], y, d=None, arms: Sequence[int] = (), mode: str = "arm") -> np.ndarray:
    """Covariance matrix of several weighted contrasts; positive semidefinite by construction."""
    y = np.asarray(y, dtype=np.float64)
    if mode == "arm" and not len(arms):
        support = np.zeros(y.size, dtype=bool)
        for c in cs:
            support |= np.asarray(c) != 0
        arms = np.unique(np.asarray(d)[support])
    blocks = [_blocks(np.asarray(c, dtype=np.float64), y, None if d is None else np.asarray(d), arms, mode)
              for c in cs]
    G = len(cs)
    V = np.empty((G, G))
    for i in range(G):
        for j in range(i, G):
            V[i, j] = V[j, i] = _gram(blocks[i], blocks[j])
    return V


def contrast_points(C, y) -> np.ndarray:
    """``C @ y`` row by row; rounding noise of a zero contrast (e.g. constant outcomes) reads as exactly zero."""
    C = np.atleast_2d(np.asarray(C, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    points = C @ y
    scale = np.abs(C) @ np.abs(y)
    points[np.abs(points) <= 64 * np.finfo(np.float64).eps * scale] = 0.0
    return points


def make_estimate(estimand: str, c, y, d=None, arms: Sequence[int] = (), mode: str = "arm") -> EffectEstimate:
    """Point, standard error and p-value of ``c @ y``."""
    c = np.asarray(c, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    point = float(contrast_points(c, y)[0])
    var = contrast_variance(c, y, d, arms, mode)
    se = math.sqrt(var)
    reliable = True
    if d is not None:
        counts = [int(np.count_nonzero(np.asarray(d)[c != 0] == a)) for a in arms]
        reliable = all(n > 1 for n in counts)
    elif np.count_nonzero(c) <= 2:
        reliable = False
    return EffectEstimate(estimand, point, se, p_value(point, se), c * c.size, reliable)


def signed_weights(ws: WeightSet, m: int, l: int) -> np.ndarray:
    if m == l:
        raise ValueError("an effect needs two distinct treatments")
    return ws.dense(m) - ws.dense(l)


def estimate_iate(ws: WeightSet, y, m: int, l: int, d=None, mode: str = "arm") -> EffectEstimate:
    """IATE(m, l; x) from the weights of a single prediction point.

    ``d`` (honest treatments) is required by the default ``"arm"`` mode; without
    it the ``"display"`` estimator is used.
    """
    c = signed_weights(ws, m, l)
    if d is None:
        mode = "display"
    return make_estimate(f"IATE({m},{l})", c, y, d, (m, l), mode)


def estimate_potential_outcome(arm_weights, y, arm: int, d=None, mode: str = "arm") -> EffectEstimate:
    """Average potential outcome ``E(Y^arm)`` from unsigned arm weights."""
    if d is None:
        mode = "display"
    return make_estimate(f"E(Y^{arm})", arm_weights, y, d, (arm,), mode)


def _as_signed_matrix(iate_weight_sets, m: int, l: int) -> np.ndarray:
    if isinstance(iate_weight_sets, np.ndarray):
        return iate_weight_sets
    return np.vstack([signed_weights(ws, m, l) for ws in iate_weight_sets])


def aggregate_gate(iate_weight_sets, spec: GroupSpec, z, m: int, l: int, d_points) -> np.ndarray:
    """Signed GATE weights: mean of the member points' signed IATE weights.

    ``iate_weight_sets`` is a sequence of :class:`WeightSet` (one per
    prediction point) or an already signed ``(n_points, N2)`` matrix.
    """
    W = _as_signed_matrix(iate_weight_sets, m, l)
    M = max(m, l, int(np.max(d_points)) if len(d_points) else 0) + 1
    members = spec.members(z, np.asarray(d_points), M)
    if members.size == 0:
        raise ValueError(f"group {z!r} is empty")
    return W[members].mean(axis=0)


def aggregate_ate(iate_weight_sets, delta: Sequence[int], m: int, l: int, d_points) -> np.ndarray:
    """Signed ATE weights over prediction points with treatment in ``delta`` (all if empty)."""
    d_points = np.asarray(d_points)
    spec = GroupSpec(np.zeros(d_points.size, dtype=np.int64), tuple(delta))
    return aggregate_gate(iate_weight_sets, spec, 0, m, l, d_points)


def wald_test(cs: Sequence[np.ndarray], y, d=None, arms: Sequence[int] = (), mode: str = "arm") -> dict:
    """Joint test that several weighted contrasts are zero.

    A singular covariance is handled with a pseudo-inverse and the degrees of
    freedom reduced to its rank (flagged as ``singular``).
    """
    y = np.asarray(y, dtype=np.float64)
    delta = np.array([np.asarray(c) @ y for c in cs])
    V = contrast_covariance(cs, y, d, arms, mode)
    scale = np.max(np.abs(np.diag(V))) if V.size else 0.0
    tol = 1e-12 * scale if scale > 0 else 0.0
    evals = np.linalg.eigvalsh(V) if V.size else np.array([])
    rank = int(np.sum(evals > max(tol, 0.0))) if scale > 0 else 0
    singular = rank < len(cs)
    if rank == 0:
        stat = 0.0 if np.allclose(delta, 0.0, atol=0.0) else math.inf
        return {"statistic": stat, "dof": 0, "p_value": 1.0 if stat == 0.0 else 0.0, "singular": True,
                "contrasts": delta, "cov": V}
    if singular:
        stat = float(delta @ np.linalg.pinv(V, rcond=1e-12, hermitian=True) @ delta)
    else:
        stat = float(delta @ np.linalg.solve(V, delta))
    stat = max(stat, 0.0)
    return {"statistic": stat, "dof": rank, "p_value": float(stats.chi2.sf(stat, rank)), "singular": singular,
            "contrasts": delta, "cov": V}


def wald_gate_equality(gate_weights: Sequence[np.ndarray], y, k=None, d=None, arms: Sequence[int] = (),
                       mode: str = "arm"):
    """Wald test of equal GATEs across ``G >= 2`` groups.

    Contrasts are ``GATE_g - GATE_G`` with weights ``w_g - w_G``. Returns
    ``(statistic, dof, p_value, singular)``; ``k`` is accepted for interface
    symmetry, the window follows the variance mode's default.
    """
    G = len(gate_weights)
    if G < 2:
        raise ValueError("need at least two groups")
    last = np.asarray(gate_weights[-1], dtype=np.float64)
    cs = [np.asarray(w, dtype=np.float64) - last for w in gate_weights[:-1]]
    if d is None:
        mode = "display"
    out = wald_test(cs, y, d, arms, mode)
    return out["statistic"], out["dof"], out["p_value"], out["singular"]


def adjacent_differences(gate_weights: Sequence[np.ndarray], labels: Sequence, y, d=None, arms=(),
                         mode: str = "arm") -> list:
    """t-tests of ``GATE_g - GATE_{g-1}`` for consecutive groups."""
    if d is None:
        mode = "display"
    out = []
    for g in range(1, len(gate_weights)):
        c = np.asarray(gate_weights[g]) - np.asarray(gate_weights[g - 1])
        out.append(make_estimate(f"GATE[{labels[g]}]-GATE[{labels[g - 1]}]", c, y, d, arms, mode))
    return out
