"""Leaf statistics and splitting objectives.

All objectives are minimised. Every function accepts :class:`LeafStats` whose
arrays may carry leading batch dimensions (the arm / pair axis is always the
last one), so the same code scores one leaf or a whole vector of candidate
splits. The compiled split search in ``_core._fast`` repeats this arithmetic
operation for operation; keep the two in sync.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Optional

import numpy as np

BASIC = "basic"
ONE_F = "one_f"
ONE_F_MCE = "one_f_mce"
ONE_F_VART = "one_f_vart"
VARIANTS = (BASIC, ONE_F, ONE_F_MCE, ONE_F_VART)

# codes understood by the split-search kernels
KERNEL_MSE, KERNEL_MCE, KERNEL_VART = 0, 1, 2


def pairs(M: int) -> list:
    """Treatment pairs ``(m, l)`` with ``m < l`` in lexicographic order."""
    return list(combinations(range(M), 2))


@dataclass
class CriterionConfig:
    variant: str = ONE_F_MCE
    penalty_on: bool = False
    lam: Optional[float] = None
    lambda_multiplier: Optional[float] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lam is not None and not (np.isfinite(self.lam) and self.lam >= 0):
            raise ValueError("lambda must be finite and >= 0")

    @property
    def uses_mce(self) -> bool:
        return self.variant == ONE_F_MCE

    @property
    def uses_penalty(self) -> bool:
        return self.penalty_on and self.variant != BASIC

    @property
    def multiplier(self) -> float:
        if self.lambda_multiplier is not None:
            return float(self.lambda_multiplier)
        return 100.0 if self.variant == ONE_F_VART else 1.0

    @property
    def kernel_code(self) -> int:
        return {BASIC: KERNEL_MSE, ONE_F: KERNEL_MSE, ONE_F_MCE: KERNEL_MCE, ONE_F_VART: KERNEL_VART}[self.variant]

    def label(self) -> str:
        name = {BASIC: "Basic", ONE_F: "OneF", ONE_F_MCE: "OneF.MCE", ONE_F_VART: "OneF.VarT"}[self.variant]
        return name + (".Pen" if self.uses_penalty else "")

    def to_dict(self) -> dict:
        return {"variant": self.variant, "penalty_on": self.penalty_on, "lam": self.lam,
                "lambda_multiplier": self.lambda_multiplier}

    @classmethod
    def from_dict(cls, d: dict) -> "CriterionConfig":
        return cls(d["variant"], bool(d["penalty_on"]), d.get("lam"), d.get("lambda_multiplier"))


def default_lambda(cfg: CriterionConfig, y: np.ndarray, d: np.ndarray, M: int) -> float:
    """Base penalty weight before the multiplier.

    MSE-type criteria use ``Var(y)``; the heterogeneity criterion uses the
    squared sum of pairwise differences of the arm means.
    """
    if cfg.variant == ONE_F_VART:
        means = [y[d == m].mean() for m in range(M)]
        s = sum(means[m] - means[l] for m, l in pairs(M))
        return float(s * s)
    return float(np.var(y))


def effective_lambda(cfg: CriterionConfig, y, d, M: int) -> float:
    if not cfg.uses_penalty:
        return 0.0
    base = cfg.lam if cfg.lam is not None else default_lambda(cfg, np.asarray(y), np.asarray(d), M)
    return float(base) * cfg.multiplier


@dataclass
class LeafStats:
    """Sufficient statistics of a set of tree-building rows.

    ``n``, ``sy``, ``syy`` have shape ``(..., M)``. ``sa``, ``sb``, ``sab`` have
    shape ``(..., P)`` for the ``P`` pairs ``(m, l)``, accumulated over rows
    with treatment in ``{m, l}``: ``sa`` sums the matched outcome in arm ``m``,
    ``sb`` the one in arm ``l``, ``sab`` their product.
    """

    n: np.ndarray
    sy: np.ndarray
    syy: np.ndarray
    sa: np.ndarray = field(default=None)
    sb: np.ndarray = field(default=None)
    sab: np.ndarray = field(default=None)

    @property
    def M(self) -> int:
        return self.n.shape[-1]

    @property
    def total(self):
        out = self.n[..., 0]
        for d in range(1, self.M):
            out = out + self.n[..., d]
        return out

    @classmethod
    def from_rows(cls, y, d, M: int, ytilde=None) -> "LeafStats":
        y = np.asarray(y, dtype=np.float64)
        d = np.asarray(d)
        n = np.zeros(M)
        sy = np.zeros(M)
        syy = np.zeros(M)
        for m in range(M):
            sel = y[d == m]
            n[m] = sel.size
            sy[m] = sel.sum()
            syy[m] = (sel * sel).sum()
        P = pairs(M)
        sa = np.zeros(len(P))
        sb = np.zeros(len(P))
        sab = np.zeros(len(P))
        if ytilde is not None:
            yt = np.asarray(ytilde, dtype=np.float64)
            for j, (m, l) in enumerate(P):
                sel = (d == m) | (d == l)
                sa[j] = yt[sel, m].sum()
                sb[j] = yt[sel, l].sum()
                sab[j] = (yt[sel, m] * yt[sel, l]).sum()
        return cls(n, sy, syy, sa, sb, sab)

    def merge(self, other: "LeafStats") -> "LeafStats":
        return LeafStats(self.n + other.n, self.sy + other.sy, self.syy + other.syy,
                         self.sa + other.sa, self.sb + other.sb, self.sab + other.sab)

    def minus(self, other: "LeafStats") -> "LeafStats":
        return LeafStats(self.n - other.n, self.sy - other.sy, self.syy - other.syy,
                         self.sa - other.sa, self.sb - other.sb, self.sab - other.sab)

    def means(self):
        return self.sy / self.n


def _require(cond, msg):
    if np.ndim(cond) == 0 and not cond:
        raise ValueError(msg)


def leaf_mse(stats: LeafStats, d: int, mu=None):
    """Mean squared deviation of arm ``d`` outcomes from the arm mean (or from ``mu``)."""
    n = stats.n[..., d]
    _require(np.all(n >= 1), f"arm {d} is empty in this leaf")
    sy = stats.sy[..., d]
    syy = stats.syy[..., d]
    if mu is None:
        return (syy - sy * sy / n) / n
    return (syy - 2.0 * mu * sy + n * mu * mu) / n


def leaf_mce(stats: LeafStats, m: int, l: int, mu=None):
    """Mean correlated error of arms ``m`` and ``l`` using matched outcomes.

    ``mu`` optionally supplies the arm means ``(mu_m, mu_l)`` to evaluate at,
    e.g. means estimated on other rows.
    """
    if m == l:
        raise ValueError("MCE needs two distinct arms")
    if m > l:
        m, l = l, m
    j = pairs(stats.M).index((m, l))
    nm = stats.n[..., m]
    nl = stats.n[..., l]
    c = nm + nl
    _require(np.all(c >= 1), f"arms {m} and {l} are both empty in this leaf")
    if mu is None:
        _require(np.all(nm >= 1) and np.all(nl >= 1), "arm means undefined in this leaf")
        mu_m = stats.sy[..., m] / nm
        mu_l = stats.sy[..., l] / nl
    else:
        mu_m, mu_l = mu
    return (c * mu_m * mu_l - mu_m * stats.sb[..., j] - mu_l * stats.sa[..., j] + stats.sab[..., j]) / c


def leaf_effect_objective(stats: LeafStats, cfg: CriterionConfig, mu=None):
    """Per-observation leaf objective for the configured variant.

    ``mu``, if given, holds arm means of shape ``(..., M)`` to evaluate at
    instead of the leaf's own means.
    """
    M = stats.M
    if cfg.variant == ONE_F_VART:
        means = stats.means() if mu is None else mu
        het = 0.0
        for m, l in pairs(M):
            diff = means[..., m] - means[..., l]
            het = het + diff * diff
        return -het
    mse_sum = 0.0
    for d in range(M):
        mse_sum = mse_sum + leaf_mse(stats, d, None if mu is None else mu[..., d])
    if not cfg.uses_mce:
        return mse_sum
    mce_sum = 0.0
    for m, l in pairs(M):
        mce_sum = mce_sum + leaf_mce(stats, m, l, None if mu is None else (mu[..., m], mu[..., l]))
    return (M - 1) * mse_sum - 2.0 * mce_sum


def penalty(stats_L: LeafStats, stats_R: LeafStats, lam: float, M: int):
    """Propensity-homogeneity penalty; ``lam`` when daughter shares coincide, 0 when fully separated."""
    nL = stats_L.total
    nR = stats_R.total
    _require(np.all(nL > 0) and np.all(nR > 0), "penalty needs two nonempty daughters")
    s = 0.0
    for d in range(M):
        diff = stats_L.n[..., d] / nL - stats_R.n[..., d] / nR
        s = s + diff * diff
    return lam * (1.0 - s / M)


def split_objective(stats_L: LeafStats, stats_R: LeafStats, cfg: CriterionConfig, lam_eff: float = 0.0):
    """Count-weighted daughter objectives plus the node-size-scaled penalty.

    ``lam_eff`` is the already multiplied penalty weight (see
    :func:`effective_lambda`); it is ignored unless the penalty is on.
    """
    nL = stats_L.total
    nR = stats_R.total
    tot = nL * leaf_effect_objective(stats_L, cfg) + nR * leaf_effect_objective(stats_R, cfg)
    if cfg.uses_penalty:
        M = stats_L.M
        s = 0.0
        for d in range(M):
            diff = stats_L.n[..., d] / nL - stats_R.n[..., d] / nR
            s = s + diff * diff
        tot = tot + (nL + nR) * lam_eff * (1.0 - s / M)
    return tot


def with_variant(cfg: CriterionConfig, variant: str) -> CriterionConfig:
    return replace(cfg, variant=variant)
