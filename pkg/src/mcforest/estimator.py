"""End-to-end estimation: optional centering, forest fit, and effect tables.

Shared by the command line and the simulation harness.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .centering import CenteringConfig, CenteringModel, center_outcomes
from .criterion import BASIC, ONE_F, ONE_F_MCE, ONE_F_VART, CriterionConfig
from .data import Sample, split_halves
from .forest import Forest, ForestConfig, build_forest
from .inference import EffectEstimate, adjacent_differences, contrast_points, make_estimate, wald_test

_LABEL_RE = re.compile(r"^(Basic|OneF|OneF\.MCE|OneF\.VarT)(\.Pen)?(\.LC-(\d+))?$")
_BASE = {"Basic": BASIC, "OneF": ONE_F, "OneF.MCE": ONE_F_MCE, "OneF.VarT": ONE_F_VART}


@dataclass(frozen=True)
class EstimatorSpec:
    """An estimator variant such as ``OneF.MCE.Pen.LC-2``."""

    criterion: CriterionConfig
    center_folds: Optional[int] = None

    @classmethod
    def parse(cls, label: str) -> "EstimatorSpec":
        m = _LABEL_RE.match(label)
        if not m:
            raise ValueError(f"cannot parse estimator label {label!r}")
        crit = CriterionConfig(_BASE[m.group(1)], m.group(2) is not None)
        return cls(crit, int(m.group(4)) if m.group(4) else None)

    @property
    def label(self) -> str:
        out = self.criterion.label()
        if self.criterion.penalty_on and self.criterion.variant == BASIC:
            out += ".Pen"
        return out + (f".LC-{self.center_folds}" if self.center_folds else "")


@dataclass
class FittedModel:
    forest: Forest
    centering: Optional[CenteringModel] = None


def fit(sample: Sample, cfg: ForestConfig, center_folds: Optional[int] = None,
        centering_forest: Optional[ForestConfig] = None) -> FittedModel:
    """Split, optionally centre the outcomes, and grow the honest forest."""
    split = split_halves(sample, cfg.seed)
    centering = None
    if center_folds:
        ccfg = CenteringConfig(center_folds, centering_forest or replace(cfg, n_trees=min(cfg.n_trees, 250)),
                               cfg.seed)
        sample, centering = center_outcomes(sample, split, ccfg)
    forest = build_forest(sample, cfg, split)
    if centering is not None:
        forest.meta["centering"] = {"K": centering.K, "seed": centering.seed}
    return FittedModel(forest, centering)


def _member_weights(d_points, delta: Sequence[int]) -> np.ndarray:
    d_points = np.asarray(d_points)
    if not len(delta):
        return np.ones(d_points.size)
    return np.isin(d_points, list(delta)).astype(np.float64)


def ate(forest: Forest, X_points, m: int, l: int, d_points=None, delta: Sequence[int] = (),
        mode: str = "arm", routing=None) -> EffectEstimate:
    """ATE(m, l; delta) averaged over the prediction points with treatment in ``delta``."""
    pw = None if d_points is None else _member_weights(d_points, delta)
    W = forest.aggregated_weights(X_points, pw, routing)
    tag = f"ATE({m},{l})" + (f"|d in {sorted(delta)}" if len(delta) else "")
    return make_estimate(tag, W[m] - W[l], forest.y_B, forest.d_B, (m, l), mode)


def potential_outcomes(forest: Forest, X_points, d_points=None, delta: Sequence[int] = (),
                       mode: str = "arm", routing=None) -> list:
    pw = None if d_points is None else _member_weights(d_points, delta)
    W = forest.aggregated_weights(X_points, pw, routing)
    return [make_estimate(f"E(Y^{a})", W[a], forest.y_B, forest.d_B, (a,), mode)
            for a in range(forest.n_treatments)]


@dataclass
class GateTable:
    name: str
    values: list
    sizes: list
    estimates: list
    differences: list  # adjacent-group t-tests
    wald: dict


def gates(forest: Forest, X_points, z, m: int, l: int, d_points=None, delta: Sequence[int] = (),
          mode: str = "arm", name: str = "z", routing=None) -> GateTable:
    """GATEs for every value of ``z`` with adjacent differences and the joint Wald test."""
    z = np.asarray(z)
    base = np.ones(z.size) if d_points is None else _member_weights(d_points, delta)
    values = sorted(np.unique(z[base > 0]).tolist())
    pw = np.vstack([base * (z == v) for v in values])
    Ws = forest.aggregated_weights(X_points, pw, routing)
    cs, ests, sizes = [], [], []
    for v, W, w in zip(values, Ws, pw):
        c = W[m] - W[l]
        cs.append(c)
        sizes.append(int(w.sum()))
        ests.append(make_estimate(f"GATE({m},{l};{name}={v})", c, forest.y_B, forest.d_B, (m, l), mode))
    diffs = adjacent_differences(cs, values, forest.y_B, forest.d_B, (m, l), mode)
    if len(cs) >= 2:
        contrasts = [c - cs[-1] for c in cs[:-1]]
        wald = wald_test(contrasts, forest.y_B, forest.d_B, (m, l), mode)
    else:
        wald = {"statistic": float("nan"), "dof": 0, "p_value": float("nan"), "singular": False}
    return GateTable(name, values, sizes, ests, diffs, wald)


def iates(forest: Forest, X_points, m: int, l: int, mode: str = "arm", with_se: bool = True,
          chunk: int = 256):
    """Per-point IATE estimates and standard errors (``NaN`` when ``with_se`` is false)."""
    X_points = forest.encode(X_points)
    n = X_points.shape[0]
    points = np.empty(n)
    ses = np.full(n, np.nan)
    for start in range(0, n, chunk):
        stop = min(n, start + chunk)
        Wm = forest.weight_matrix(X_points[start:stop], m)
        Wl = forest.weight_matrix(X_points[start:stop], l)
        C = Wm - Wl
        points[start:stop] = contrast_points(C, forest.y_B)
        if with_se:
            for j in range(stop - start):
                e = make_estimate("IATE", C[j], forest.y_B, forest.d_B, (m, l), mode)
                ses[start + j] = e.std_error
    return points, ses


def iate_summary(points: np.ndarray, ses: np.ndarray, level: float = 0.05) -> dict:
    from scipy import stats

    crit = stats.norm.isf(level / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.where(ses > 0, np.abs(points) / ses, np.where(points == 0, 0.0, np.inf))
    return {
        "n": int(points.size),
        "mean": float(points.mean()),
        "sd": float(points.std(ddof=1)) if points.size > 1 else 0.0,
        "share_negative": float(np.mean(points < 0)),
        "share_positive": float(np.mean(points > 0)),
        "mean_se": float(np.nanmean(ses)) if np.any(np.isfinite(ses)) else math.nan,
        "share_significant": float(np.mean(t > crit)),
    }
