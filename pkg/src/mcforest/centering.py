"""Local centering: replace ``y`` by ``y - E(Y|X)`` before growing the causal forest.

One pooled regression forest is grown on sample A. Its leaf values are
cross-fitted: a row in fold ``k`` of A is predicted with leaf means computed
from the A rows outside fold ``k``. Rows of sample B are predicted with leaf
means from all of A, so no B outcome enters any prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import DataError, Sample, SplitAssignment
from .forest import ForestConfig, build_regression_forest, canonical_halves

# Predictions are snapped to a dyadic grid this many bits below the data
# magnitude, so ``(y - pred) + pred == y`` for fixed-point outcomes.
_GRID_BITS = 40


@dataclass
class CenteringConfig:
    K: int = 2
    forest: ForestConfig = field(default_factory=lambda: ForestConfig(n_trees=250))
    seed: int = 0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("centering needs K >= 2 folds")

    def to_dict(self) -> dict:
        return {"K": self.K, "forest": self.forest.to_dict(), "seed": self.seed}


@dataclass
class CenteringModel:
    """Bookkeeping of a centering run, indexed by original row id."""

    K: int
    seed: int
    fold: np.ndarray  # fold of each A row (-1 for B rows)
    predictions: np.ndarray
    # rounding residual of ``(y - pred) + pred``; makes ``restore`` exact
    compensation: np.ndarray = None

    def __post_init__(self):
        if self.compensation is None:
            self.compensation = np.zeros_like(self.predictions)

    def restore(self, y_centered) -> np.ndarray:
        return (np.asarray(y_centered, dtype=np.float64) + self.predictions) + self.compensation

    def to_dict(self) -> dict:
        return {"K": self.K, "seed": self.seed, "fold": self.fold.tolist(), "predictions": self.predictions.tolist(),
                "compensation": self.compensation.tolist()}


def _snap(pred: np.ndarray, y: np.ndarray) -> np.ndarray:
    top = max(float(np.max(np.abs(pred), initial=0.0)), float(np.max(np.abs(y), initial=0.0)))
    if top == 0.0 or not math.isfinite(top):
        return pred
    e = math.frexp(top)[1]
    q = math.ldexp(1.0, e - _GRID_BITS)
    return np.round(pred / q) * q


def _leaf_means(tree, leaf_rows: np.ndarray, y: np.ndarray, weights: np.ndarray):
    """Per-node sums and counts of the weighted rows, accumulated up the tree."""
    n = tree.n_nodes
    cnt = np.bincount(leaf_rows, weights=weights, minlength=n)
    sy = np.bincount(leaf_rows, weights=weights * y, minlength=n)
    for node in range(n - 1, 0, -1):
        cnt[tree.parent[node]] += cnt[node]
        sy[tree.parent[node]] += sy[node]
    return sy, cnt


def _resolve(tree, leaves: np.ndarray, cnt: np.ndarray) -> np.ndarray:
    """Nearest ancestor-or-self of each leaf holding at least one row."""
    res = np.arange(tree.n_nodes)
    for node in range(1, tree.n_nodes):
        if cnt[node] == 0:
            res[node] = res[tree.parent[node]]
    return res[leaves]


def center_outcomes(sample: Sample, split: SplitAssignment, cfg: CenteringConfig):
    """Return ``(centered sample, CenteringModel)``; ``y`` is replaced by residuals in both halves."""
    A, B = canonical_halves(sample, split)
    if cfg.K > A.size:
        raise DataError(f"K={cfg.K} folds exceed the {A.size} rows of sample A")
    sample_A = sample.take(A)
    trees = build_regression_forest(sample_A, cfg.forest, cfg.seed)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 0x63656E74]))
    fold_A = np.empty(A.size, dtype=np.int64)
    for k, part in enumerate(np.array_split(rng.permutation(A.size), cfg.K)):
        fold_A[part] = k
    kinds = sample.kinds
    x_B = sample.x[B]
    pred_A = np.zeros(A.size)
    pred_B = np.zeros(B.size)
    yA = sample_A.y
    for tree in trees:
        leaf_A = tree.apply(sample_A.x, kinds)
        leaf_B = tree.apply(x_B, kinds)
        sy_all, cnt_all = _leaf_means(tree, leaf_A, yA, np.ones(A.size))
        for k in range(cfg.K):
            out = fold_A != k
            sy, cnt = _leaf_means(tree, leaf_A, yA, out.astype(np.float64))
            members = np.flatnonzero(~out)
            r = _resolve(tree, leaf_A[members], cnt)
            pred_A[members] += sy[r] / cnt[r]
        r = _resolve(tree, leaf_B, cnt_all)
        pred_B += sy_all[r] / cnt_all[r]
    pred = np.zeros(sample.n)
    pred[A] = pred_A / len(trees)
    pred[B] = pred_B / len(trees)
    pred = _snap(pred, sample.y)
    fold = np.full(sample.n, -1, dtype=np.int64)
    fold[A] = fold_A
    resid = sample.y - pred
    comp = sample.y - (resid + pred)
    return sample.with_outcome(resid), CenteringModel(cfg.K, cfg.seed, fold, pred, comp)
