"""Common-support trimming with forest propensities and covariate balance checks."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .forest import Forest


class SupportError(ValueError):
    pass


@dataclass(frozen=True)
class SupportRule:
    q_low: float = 0.05
    q_high: float = 0.95

    def __post_init__(self):
        if not 0.0 <= self.q_low < self.q_high <= 1.0:
            raise ValueError("support rule needs 0 <= q_low < q_high <= 1")


@dataclass
class TrimReport:
    n_rows: int
    n_dropped: int
    dropped_per_arm: np.ndarray  # rows dropped because of each arm's propensity

    @property
    def drop_share(self) -> float:
        return self.n_dropped / self.n_rows if self.n_rows else 0.0

    def summary(self) -> str:
        arms = ", ".join(f"arm {m}: {int(c)}" for m, c in enumerate(self.dropped_per_arm))
        return f"dropped {self.n_dropped} of {self.n_rows} rows ({100 * self.drop_share:.1f}%); {arms}"


def forest_propensity(forest: Forest, x) -> np.ndarray:
    """Honest treatment shares in each point's leaf, averaged over trees; rows sum to one."""
    return forest.propensity(np.atleast_2d(x))


def trim_support(rows, propensities, rule: SupportRule = SupportRule()):
    """Drop rows where any arm's propensity lies outside ``[q_low, q_high]``.

    Returns ``(kept_rows, dropped_rows, TrimReport)``.
    """
    rows = np.asarray(rows)
    P = np.atleast_2d(np.asarray(propensities, dtype=np.float64))
    if P.shape[0] != rows.shape[0]:
        raise ValueError("one propensity row per data row is required")
    outside = (P < rule.q_low) | (P > rule.q_high)
    drop = outside.any(axis=1)
    if drop.all() and rows.size:
        raise SupportError("support empty: every row violates the propensity bounds")
    report = TrimReport(int(rows.size), int(drop.sum()), outside.sum(axis=0))
    return rows[~drop], rows[drop], report


def standardized_diff(x1, x0) -> float:
    """``|mean1 - mean0| / sqrt((var1 + var0) / 2)`` in percent (sample variances).

    Zero spread with different means gives ``inf``; identical constants give 0.
    """
    x1 = np.asarray(x1, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x1.size < 2 or x0.size < 2:
        raise ValueError("each arm needs at least 2 rows")
    diff = abs(x1.mean() - x0.mean())
    scale = math.sqrt((x1.var(ddof=1) + x0.var(ddof=1)) / 2.0)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return float(100.0 * diff / scale)


def standardized_diff_from_moments(mean1: float, mean0: float, sd1: float, sd0: float) -> float:
    """Same statistic from summary moments, for published tables."""
    scale = math.sqrt((sd1 * sd1 + sd0 * sd0) / 2.0)
    diff = abs(mean1 - mean0)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return float(100.0 * diff / scale)


def post_balance(arm_weights: np.ndarray, feature, m: int = 1, l: int = 0) -> float:
    """Weighted arm-``m`` minus arm-``l`` mean of a feature used as pseudo-outcome.

    ``arm_weights`` is ``(M, n_honest)``, e.g. ``Forest.aggregated_weights``.
    """
    feature = np.asarray(feature, dtype=np.float64)
    return float(arm_weights[m] @ feature - arm_weights[l] @ feature)


def balance_table(forest: Forest, X_points, m: int = 1, l: int = 0) -> list:
    """Per feature: arm means and standardized difference in the honest sample, and post-forest difference."""
    W = forest.aggregated_weights(X_points)
    out = []
    for u, f in enumerate(forest.features):
        col = forest.x_B[:, u]
        a, b = col[forest.d_B == m], col[forest.d_B == l]
        out.append({
            "feature": f.name,
            f"mean_{m}": float(a.mean()),
            f"mean_{l}": float(b.mean()),
            "std_diff_pct": standardized_diff(a, b),
            "post_diff": post_balance(W, col, m, l),
        })
    return out


def write_balance_csv(rows: list, path, header_lines=()) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for k, v in r.items()})
