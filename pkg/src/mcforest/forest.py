"""Honest forests: growth on sample A, leaf filling from sample B, weights.

Every tree is grown on a subsample of the tree-building half and filled
with the whole honest half. Predictions are weighted averages of honest
outcomes; the weights are the primary output used by inference.
"""

from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import sparse

from . import _core
from .criterion import BASIC, CriterionConfig, effective_lambda, leaf_mce, leaf_mse, pairs, LeafStats, ONE_F_VART
from .data import DataError, FeatureMeta, Sample, SplitAssignment, check_encoded, split_halves
from .matching import feature_scales, match_outcomes

MODEL_VERSION = "mcforest-model/1"


@dataclass
class ForestConfig:
    n_trees: int = 1000
    subsample_share: float = 0.5
    min_leaf_per_arm: int = 2
    min_leaf_total: int = 5
    alpha: float = 0.05
    feature_draw_mean: Optional[float] = None
    criterion: CriterionConfig = field(default_factory=CriterionConfig)
    seed: int = 0
    n_threads: int = 1

    def __post_init__(self):
        if not 0 < self.subsample_share <= 1:
            raise ValueError("subsample_share must be in (0, 1]")
        if self.min_leaf_per_arm < 1:
            raise ValueError("min_leaf_per_arm must be >= 1")
        if not 0 < self.alpha <= 0.5:
            raise ValueError("alpha must be in (0, 0.5]")
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")

    def draw_mean(self, p: int) -> float:
        """Mean of the Poisson part of the per-node feature count (``inf`` = all features)."""
        if self.feature_draw_mean is None:
            return max(1.0, 2.0 * p / 3.0)
        return float(self.feature_draw_mean)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["criterion"] = self.criterion.to_dict()
        if out["feature_draw_mean"] is not None and math.isinf(out["feature_draw_mean"]):
            out["feature_draw_mean"] = "inf"
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "ForestConfig":
        d = dict(d)
        d["criterion"] = CriterionConfig.from_dict(d["criterion"])
        if d.get("feature_draw_mean") == "inf":
            d["feature_draw_mean"] = math.inf
        return cls(**d)


@dataclass
class Tree:
    """One grown tree plus its honest payload.

    ``arms`` lists the treatments this tree produces weights for: all of
    them for joint trees, a single arm for the per-arm trees of ``Basic``.
    """

    index: int
    arms: tuple
    feature: np.ndarray
    threshold: np.ndarray
    mask: np.ndarray
    left: np.ndarray
    right: np.ndarray
    parent: np.ndarray
    subsample: np.ndarray  # rows of sample A used for growing
    # honest payload, filled by fill_honest
    honest_leaf: Optional[np.ndarray] = None
    counts: Optional[np.ndarray] = None  # (n_nodes, M) honest rows per arm in the subtree
    sums: Optional[np.ndarray] = None
    resolved: Optional[np.ndarray] = None  # (n_nodes, M) node whose arm rows a leaf uses
    _ranges: Optional[tuple] = None
    _levels: Optional[list] = None

    @property
    def n_nodes(self) -> int:
        return int(self.feature.shape[0])

    @property
    def is_leaf(self) -> np.ndarray:
        return self.feature < 0

    def apply(self, X, kinds) -> np.ndarray:
        return _core.apply_tree(np.ascontiguousarray(X, dtype=np.float64), self.feature, self.threshold,
                                self.mask, self.left, self.right, kinds)

    def levels(self) -> list:
        """Non-root nodes grouped by depth, shallowest first."""
        if self._levels is None:
            depth = np.zeros(self.n_nodes, dtype=np.int64)
            for node in range(1, self.n_nodes):
                depth[node] = depth[self.parent[node]] + 1
            order = np.argsort(depth, kind="stable")
            bounds = np.searchsorted(depth[order], np.arange(1, depth.max() + 2))
            self._levels = [order[bounds[i]:bounds[i + 1]] for i in range(len(bounds) - 1)]
        return self._levels

    def structure(self) -> tuple:
        """Split structure only; equal for trees that partition identically."""
        return (self.feature.tobytes(), self.threshold.tobytes(), self.mask.tobytes(),
                self.left.tobytes(), self.right.tobytes())

    def subtree_rows(self, arm: int, honest_d: np.ndarray):
        """Honest rows of ``arm`` ordered so that every subtree is a contiguous range.

        Returns ``(rows, lo, hi)``: the rows under node ``r`` are ``rows[lo[r]:hi[r]]``.
        """
        if self._ranges is None:
            self._ranges = {}
        if arm not in self._ranges:
            n = self.n_nodes
            pos = np.empty(n, dtype=np.int64)
            size = np.ones(n, dtype=np.int64)
            stack = [0]
            t = 0
            while stack:
                node = stack.pop()
                pos[node] = t
                t += 1
                if self.feature[node] >= 0:
                    stack.append(self.right[node])
                    stack.append(self.left[node])
            for node in range(n - 1, 0, -1):
                size[self.parent[node]] += size[node]
            rows = np.flatnonzero(honest_d == arm)
            key = pos[self.honest_leaf[rows]]
            o = np.argsort(key, kind="stable")
            rows = rows[o]
            key = key[o]
            lo = np.searchsorted(key, pos, side="left")
            hi = np.searchsorted(key, pos + size, side="left")
            self._ranges[arm] = (rows, lo, hi)
        return self._ranges[arm]


@dataclass
class Routing:
    n_points: int
    leaves: dict  # id(tree) -> leaf per point
    cache: dict = field(default_factory=dict)


@dataclass
class WeightSet:
    """Sparse per-arm weights over honest rows; each arm sums to one."""

    rows: list  # per arm: honest row indices
    weights: list  # per arm: weights, same length
    n_honest: int

    def dense(self, arm: int) -> np.ndarray:
        out = np.zeros(self.n_honest)
        out[self.rows[arm]] = self.weights[arm]
        return out

    def arm_sum(self, arm: int) -> float:
        return float(np.sum(self.weights[arm]))


def fill_honest(tree: Tree, x_B: np.ndarray, y_B: np.ndarray, d_B: np.ndarray, M: int, kinds) -> Tree:
    """Route the honest rows through ``tree`` and resolve arms missing from a leaf.

    An arm with no honest rows in a leaf borrows the rows of the nearest
    ancestor that has some.
    """
    leaf = tree.apply(x_B, kinds)
    n = tree.n_nodes
    counts = np.zeros((n, M), dtype=np.int64)
    sums = np.zeros((n, M))
    for m in range(M):
        sel = d_B == m
        counts[:, m] = np.bincount(leaf[sel], minlength=n)
        sums[:, m] = np.bincount(leaf[sel], weights=y_B[sel], minlength=n)
    for node in range(n - 1, 0, -1):
        counts[tree.parent[node]] += counts[node]
        sums[tree.parent[node]] += sums[node]
    for m in tree.arms:
        if counts[0, m] == 0:
            raise DataError(f"treatment arm {m} is empty in the honest sample")
    resolved = np.full((n, M), -1, dtype=np.int64)
    for node in np.flatnonzero(tree.feature < 0):
        for m in tree.arms:
            r = node
            while counts[r, m] == 0:
                r = tree.parent[r]
            resolved[node, m] = r
    tree.honest_leaf = leaf
    tree.counts = counts
    tree.sums = sums
    tree.resolved = resolved
    tree._ranges = None
    return tree


def _max_nodes(n: int, M: int, cfg: ForestConfig) -> int:
    L = max(1, cfg.min_leaf_total, M * cfg.min_leaf_per_arm)
    return 2 * (n // L) + 1


def grow_tree(sample_A: Sample, ytilde: Optional[np.ndarray], subsample: np.ndarray, cfg: ForestConfig,
              rng: np.random.Generator, lam_eff: float = 0.0, arm: Optional[int] = None,
              variant_code: Optional[int] = None) -> tuple:
    """Grow one tree on ``subsample`` (row ids of ``sample_A``).

    With ``arm`` set, a single-arm regression tree with MSE splitting is
    grown on the rows of that arm (``Basic`` and regression forests).
    Returns the node arrays from the kernel.
    """
    p = sample_A.p
    if arm is None:
        M = sample_A.n_treatments
        d = sample_A.d
        code = cfg.criterion.kernel_code if variant_code is None else variant_code
        pen = int(cfg.criterion.uses_penalty and variant_code is None)
        yt = ytilde if (code == 1 and ytilde is not None) else np.zeros((1, max(M, 1)))
    else:
        M, d, code, pen, lam_eff = 1, np.zeros(sample_A.n, dtype=np.int64), 0, 0, 0.0
        yt = np.zeros((1, 1))
    max_nodes = _max_nodes(len(subsample), M, cfg)
    mean = cfg.draw_mean(p)
    keys = rng.random((max_nodes, p))
    if math.isinf(mean):
        vcounts = np.full(max_nodes, p, dtype=np.int64)
    else:
        vcounts = rng.poisson(mean, max_nodes).astype(np.int64)
    return _core.grow_tree(sample_A.x, sample_A.y, np.ascontiguousarray(d, dtype=np.int64),
                           np.ascontiguousarray(yt, dtype=np.float64), subsample, sample_A.kinds, M, code, pen,
                           float(lam_eff), cfg.min_leaf_per_arm, cfg.min_leaf_total, cfg.alpha, keys, vcounts)


def _subsample(rng, rows: np.ndarray, share: float) -> np.ndarray:
    size = max(1, int(round(share * rows.size)))
    if size >= rows.size:
        return rows.copy()
    return np.sort(rows[rng.choice(rows.size, size=size, replace=False)])


@dataclass
class Forest:
    trees: list
    config: ForestConfig
    features: list
    n_treatments: int
    split: SplitAssignment
    x_B: np.ndarray
    y_B: np.ndarray
    d_B: np.ndarray
    honest_ids: np.ndarray  # original row id of every honest row
    lam_eff: float = 0.0
    matched_fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_trees(self) -> int:
        return len({t.index for t in self.trees})

    @property
    def n_honest(self) -> int:
        return int(self.y_B.shape[0])

    @property
    def kinds(self) -> np.ndarray:
        return np.array([1 if f.is_unordered else 0 for f in self.features], dtype=np.int8)

    def _ordered_trees(self):
        return sorted(self.trees, key=lambda t: (t.index, t.arms))

    def trees_for_arm(self, arm: int) -> list:
        return [t for t in self._ordered_trees() if arm in t.arms]

    def encode(self, X) -> np.ndarray:
        return check_encoded(X, self.features)

    # ---- weights -------------------------------------------------------
    def weight_matrix(self, X, arm: int) -> np.ndarray:
        """Dense ``(n_points, n_honest)`` weights of ``arm`` for each point of ``X``."""
        X = self.encode(X)
        nq, N2 = X.shape[0], self.n_honest
        trees = self.trees_for_arm(arm)
        flat_parts, val_parts = [], []
        qidx = np.arange(nq, dtype=np.int64)
        for tree in trees:
            res = tree.resolved[tree.apply(X, self.kinds), arm]
            rows, lo, hi = tree.subtree_rows(arm, self.d_B)
            start = lo[res]
            cnt = hi[res] - start
            tot = int(cnt.sum())
            rep_q = np.repeat(qidx, cnt)
            offs = np.arange(tot) - np.repeat(np.cumsum(cnt) - cnt, cnt)
            cols = rows[np.repeat(start, cnt) + offs]
            flat_parts.append(rep_q * N2 + cols)
            val_parts.append(np.repeat(1.0 / cnt, cnt))
        flat = np.concatenate(flat_parts)
        vals = np.concatenate(val_parts)
        W = np.bincount(flat, weights=vals, minlength=nq * N2).reshape(nq, N2)
        return W / len(trees)

    def predict_weights(self, x) -> WeightSet:
        x = self.encode(np.atleast_2d(x))
        if x.shape[0] != 1:
            raise ValueError("predict_weights takes a single feature vector")
        rows, weights = [], []
        for m in range(self.n_treatments):
            w = self.weight_matrix(x, m)[0]
            nz = np.flatnonzero(w)
            rows.append(nz)
            weights.append(w[nz])
        return WeightSet(rows, weights, self.n_honest)

    def route(self, X) -> "Routing":
        """Leaf of every point in every tree; reusable across aggregations."""
        X = self.encode(X)
        kinds = self.kinds
        return Routing(X.shape[0], {id(t): t.apply(X, kinds) for t in self.trees})

    def aggregated_weights(self, X=None, point_weights=None, routing: Optional["Routing"] = None) -> np.ndarray:
        """Per-arm weights averaged over prediction points.

        Equals the (optionally ``point_weights``-weighted) mean of the rows of
        :meth:`weight_matrix`, computed per tree from leaf-level masses.
        ``point_weights`` of shape ``(G, n_points)`` gives ``G`` aggregates at
        once and an output of shape ``(G, M, n_honest)``; a vector or ``None``
        gives ``(M, n_honest)``.
        """
        if routing is None:
            routing = self.route(X)
        nq = routing.n_points
        single = point_weights is None or np.ndim(point_weights) == 1
        pw = np.ones((1, nq)) if point_weights is None else np.atleast_2d(np.asarray(point_weights, dtype=np.float64))
        if pw.shape[1] != nq:
            raise ValueError("point_weights do not match the prediction points")
        total_pw = pw.sum(axis=1)
        if np.any(total_pw <= 0):
            raise ValueError("empty set of prediction points")
        G = pw.shape[0]
        acc = np.zeros((self.n_treatments, G, self.n_honest))
        n_used = np.zeros(self.n_treatments)
        arm_rows = [np.flatnonzero(self.d_B == m) for m in range(self.n_treatments)]
        for tree in self._ordered_trees():
            leaf_mass = self._leaf_mass(tree, routing, pw)
            for m in tree.arms:
                mass = leaf_mass.copy()
                res = tree.resolved[:, m]
                fb = np.flatnonzero((res >= 0) & (res != np.arange(tree.n_nodes)))
                if fb.size:
                    mass[:, fb] = 0.0
                    for j, node in zip(fb, res[fb]):
                        mass[:, node] += leaf_mass[:, j]
                cnt = tree.counts[:, m]
                pos = cnt > 0
                mass[:, pos] = mass[:, pos] / cnt[pos]
                for level in tree.levels():
                    mass[:, level] += mass[:, tree.parent[level]]
                acc[m][:, arm_rows[m]] += mass[:, tree.honest_leaf[arm_rows[m]]]
                n_used[m] += 1
        out = np.transpose(acc, (1, 0, 2)) / (n_used[None, :, None] * total_pw[:, None, None])
        return out[0] if single else out

    @staticmethod
    def _leaf_mass(tree: Tree, routing: "Routing", pw: np.ndarray) -> np.ndarray:
        """Point-weight mass per leaf, ``(G, n_nodes)``."""
        key = id(tree)
        if key not in routing.cache:
            leaves = routing.leaves[key]
            order = np.argsort(leaves, kind="stable")
            sl = leaves[order]
            starts = np.flatnonzero(np.concatenate(([True], sl[1:] != sl[:-1])))
            routing.cache[key] = (order, starts, sl[starts])
        order, starts, nodes = routing.cache[key]
        mass = np.zeros((pw.shape[0], tree.n_nodes))
        mass[:, nodes] = np.add.reduceat(pw[:, order], starts, axis=1)
        return mass

    def predict_mu(self, X) -> np.ndarray:
        """Forest estimates of every arm's conditional mean outcome, ``(n_points, M)``."""
        X = self.encode(X)
        out = np.zeros((X.shape[0], self.n_treatments))
        for m in range(self.n_treatments):
            trees = self.trees_for_arm(m)
            for tree in trees:
                res = tree.resolved[tree.apply(X, self.kinds), m]
                out[:, m] += tree.sums[res, m] / tree.counts[res, m]
            out[:, m] /= len(trees)
        return out

    def propensity(self, X) -> np.ndarray:
        """Honest treatment shares in each point's leaf, averaged over trees."""
        X = self.encode(X)
        out = np.zeros((X.shape[0], self.n_treatments))
        ordered = self._ordered_trees()
        for tree in ordered:
            leaf = tree.apply(X, self.kinds)
            c = tree.counts[leaf].astype(np.float64)
            tot = c.sum(axis=1, keepdims=True)
            if np.any(tot == 0):
                c = tree.counts[0][None, :].repeat(len(leaf), 0).astype(np.float64)
                tot = c.sum(axis=1, keepdims=True)
            out += c / tot
        return out / len(ordered)

    # ---- persistence ---------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "version": MODEL_VERSION,
            "config": self.config.to_dict(),
            "features": [f.to_dict() for f in self.features],
            "n_treatments": self.n_treatments,
            "split": {"A": self.split.indices_A.tolist(), "B": self.split.indices_B.tolist(), "seed": self.split.seed},
            "honest": {"x": self.x_B.tolist(), "y": self.y_B.tolist(), "d": self.d_B.tolist(),
                       "ids": self.honest_ids.tolist()},
            "lam_eff": self.lam_eff,
            "matched_fingerprint": self.matched_fingerprint,
            "meta": self.meta,
            "trees": [
                {"index": t.index, "arms": list(t.arms), "feature": t.feature.tolist(),
                 "threshold": t.threshold.tolist(), "mask": [int(v) for v in t.mask],
                 "left": t.left.tolist(), "right": t.right.tolist(), "parent": t.parent.tolist(),
                 "subsample": t.subsample.tolist()}
                for t in self.trees
            ],
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "Forest":
        if raw.get("version") != MODEL_VERSION:
            raise DataError(f"unsupported model version {raw.get('version')!r}")
        features = [FeatureMeta.from_dict(f) for f in raw["features"]]
        M = int(raw["n_treatments"])
        h = raw["honest"]
        x_B = np.array(h["x"], dtype=np.float64).reshape(len(h["y"]), len(features))
        y_B = np.array(h["y"], dtype=np.float64)
        d_B = np.array(h["d"], dtype=np.int64)
        kinds = np.array([1 if f.is_unordered else 0 for f in features], dtype=np.int8)
        trees = []
        for t in raw["trees"]:
            tree = Tree(int(t["index"]), tuple(t["arms"]), np.array(t["feature"], dtype=np.int64),
                        np.array(t["threshold"], dtype=np.float64), np.array(t["mask"], dtype=np.uint64),
                        np.array(t["left"], dtype=np.int64), np.array(t["right"], dtype=np.int64),
                        np.array(t["parent"], dtype=np.int64), np.array(t["subsample"], dtype=np.int64))
            trees.append(fill_honest(tree, x_B, y_B, d_B, M, kinds))
        s = raw["split"]
        split = SplitAssignment(np.array(s["A"], dtype=np.int64), np.array(s["B"], dtype=np.int64), int(s["seed"]))
        return cls(trees, ForestConfig.from_dict(raw["config"]), features, M, split, x_B, y_B, d_B,
                   np.array(h["ids"], dtype=np.int64), float(raw["lam_eff"]), raw.get("matched_fingerprint", ""),
                   raw.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "Forest":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def canonical_halves(sample: Sample, split: SplitAssignment):
    """Both halves re-ordered by row content, so results do not depend on input order."""
    rank = np.empty(sample.n, dtype=np.int64)
    rank[sample.canonical_order()] = np.arange(sample.n)
    A = split.indices_A[np.argsort(rank[split.indices_A], kind="stable")]
    B = split.indices_B[np.argsort(rank[split.indices_B], kind="stable")]
    return A, B


def build_forest(sample: Sample, cfg: ForestConfig, split: Optional[SplitAssignment] = None) -> Forest:
    """Split, match, grow ``cfg.n_trees`` honest trees and fill them from sample B.

    Tree ``b`` draws all its randomness from ``SeedSequence([seed, b])``, so
    the result does not depend on the number of threads.
    """
    sample.validate()
    if split is None:
        split = split_halves(sample, cfg.seed)
    A, B = canonical_halves(sample, split)
    sample_A = sample.take(A)
    sample_B = sample.take(B)
    M = sample.n_treatments
    for name, part in (("tree-building", sample_A), ("honest", sample_B)):
        missing = [m for m in range(M) if not np.any(part.d == m)]
        if missing:
            raise DataError(f"treatment arm(s) {missing} absent from the {name} half")
    crit = cfg.criterion
    ytilde = None
    fingerprint = ""
    if crit.uses_mce:
        ytilde = match_outcomes(sample_A, feature_scales(sample_A)).ytilde
        fingerprint = hashlib.sha256(ytilde.tobytes()).hexdigest()[:16]
    lam_eff = effective_lambda(crit, sample_A.y, sample_A.d, M)
    all_rows = np.arange(sample_A.n, dtype=np.int64)
    arm_rows = [np.flatnonzero(sample_A.d == m) for m in range(M)]
    kinds = sample.kinds

    def grow(b: int) -> list:
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, b]))
        out = []
        if crit.variant == BASIC:
            for m in range(M):
                sub = _subsample(rng, arm_rows[m], cfg.subsample_share)
                arrays = grow_tree(sample_A, None, sub, cfg, rng, arm=m)
                out.append(Tree(b, (m,), *arrays[:6], subsample=sub))
        else:
            sub = _subsample(rng, all_rows, cfg.subsample_share)
            arrays = grow_tree(sample_A, ytilde, sub, cfg, rng, lam_eff)
            out.append(Tree(b, tuple(range(M)), *arrays[:6], subsample=sub))
        for tree in out:
            fill_honest(tree, sample_B.x, sample_B.y, sample_B.d, M, kinds)
        return out

    if cfg.n_threads > 1:
        with ThreadPoolExecutor(cfg.n_threads) as pool:
            grown = list(pool.map(grow, range(cfg.n_trees)))
    else:
        grown = [grow(b) for b in range(cfg.n_trees)]
    trees = [t for group in grown for t in group]
    return Forest(trees, cfg, sample.features, M, split, sample_B.x, sample_B.y, sample_B.d, B, lam_eff, fingerprint)


def build_regression_forest(sample_A: Sample, cfg: ForestConfig, seed: int) -> list:
    """Pooled-arm regression trees for ``E(Y|X)`` grown on all rows of ``sample_A``."""
    pooled = Sample(sample_A.y, np.zeros(sample_A.n, dtype=np.int64), sample_A.x, sample_A.features, 1)
    rows = np.arange(pooled.n, dtype=np.int64)

    def grow(b: int) -> Tree:
        rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
        sub = _subsample(rng, rows, cfg.subsample_share)
        arrays = grow_tree(pooled, None, sub, cfg, rng, arm=0)
        return Tree(b, (0,), *arrays[:6], subsample=sub)

    if cfg.n_threads > 1:
        with ThreadPoolExecutor(cfg.n_threads) as pool:
            return list(pool.map(grow, range(cfg.n_trees)))
    return [grow(b) for b in range(cfg.n_trees)]


def predict_weights(forest: Forest, x) -> WeightSet:
    return forest.predict_weights(x)


def predict_iate(forest: Forest, x, m: int, l: int) -> float:
    """``mu_m(x) - mu_l(x)`` from the forest weights."""
    if m == l:
        raise ValueError("IATE needs two distinct treatments")
    ws = forest.predict_weights(x)
    return float(ws.weights[m] @ forest.y_B[ws.rows[m]] - ws.weights[l] @ forest.y_B[ws.rows[l]])


# ---- out-of-bag tuning ---------------------------------------------------

def _oob_leaf_objective(stats: LeafStats, mu: np.ndarray, crit: CriterionConfig) -> float:
    M = stats.M
    if crit.variant == ONE_F_VART:
        het = 0.0
        for m, l in pairs(M):
            diff = mu[m] - mu[l]
            het += diff * diff
        return -het
    mse = 0.0
    for m in range(M):
        if stats.n[m] >= 1:
            mse += leaf_mse(stats, m, mu[m])
    if not crit.uses_mce:
        return mse
    mce = 0.0
    for m, l in pairs(M):
        if stats.n[m] + stats.n[l] >= 1:
            mce += leaf_mce(stats, m, l, (mu[m], mu[l]))
    return (M - 1) * mse - 2.0 * mce


def oob_objective(sample: Sample, cfg: ForestConfig, n_trees: Optional[int] = None) -> float:
    """Mean out-of-subsample value of the candidate's own leaf criterion.

    Rows of sample A not drawn for a tree are routed through it; each leaf is
    scored with the tree-building arm means of that leaf. The split penalty
    is not part of the score.
    """
    n_trees = cfg.n_trees if n_trees is None else n_trees
    small = replace(cfg, n_trees=n_trees)
    forest = build_forest(sample, small)
    A, _ = canonical_halves(sample, forest.split)
    sample_A = sample.take(A)
    M = sample.n_treatments
    crit = cfg.criterion
    ytilde = match_outcomes(sample_A, feature_scales(sample_A)).ytilde if crit.uses_mce else None
    kinds = sample.kinds
    total, weight = 0.0, 0
    for tree in forest._ordered_trees():
        if crit.variant == BASIC:
            (m,) = tree.arms
            pool = np.flatnonzero(sample_A.d == m)
        else:
            pool = np.arange(sample_A.n)
        oob = np.setdiff1d(pool, tree.subsample)
        if oob.size == 0:
            continue
        leaf_in = tree.apply(sample_A.x[tree.subsample], kinds)
        leaf_out = tree.apply(sample_A.x[oob], kinds)
        for leaf in np.unique(leaf_out):
            rows_out = oob[leaf_out == leaf]
            rows_in = tree.subsample[leaf_in == leaf]
            if crit.variant == BASIC:
                mu = np.array([sample_A.y[rows_in].mean() if rows_in.size else sample_A.y[tree.subsample].mean()])
                stats = LeafStats.from_rows(sample_A.y[rows_out], np.zeros(rows_out.size, dtype=np.int64), 1)
                cfg1 = replace(crit, variant="one_f")
            else:
                mu = np.empty(M)
                for m in range(M):
                    arm_in = rows_in[sample_A.d[rows_in] == m]
                    if arm_in.size == 0:
                        arm_in = tree.subsample[sample_A.d[tree.subsample] == m]
                    mu[m] = sample_A.y[arm_in].mean() if arm_in.size else sample_A.y.mean()
                stats = LeafStats.from_rows(sample_A.y[rows_out], sample_A.d[rows_out], M,
                                            None if ytilde is None else ytilde[rows_out])
                cfg1 = crit
            total += rows_out.size * _oob_leaf_objective(stats, mu, cfg1)
            weight += rows_out.size
    return total / weight if weight else math.inf


def tune_oob(sample: Sample, candidate_cfgs: list, n_trees: int = 50) -> tuple:
    """Pick the candidate with the lowest out-of-bag objective; ties go to the first.

    Returns ``(best_config, oob_values)``.
    """
    if not candidate_cfgs:
        raise ValueError("need at least one candidate configuration")
    if len(candidate_cfgs) == 1:
        return candidate_cfgs[0], [float("nan")]
    values = [oob_objective(sample, c, min(n_trees, c.n_trees)) for c in candidate_cfgs]
    best = int(np.argmin(values))
    return candidate_cfgs[best], values
