"""Time the compiled kernels against the numpy reference implementation.

    python3 benchmarks/bench_kernels.py [--n 2000] [--trees 20] [--repeat 3]

Reports the best wall time per kernel and backend, and the speed-up. Both
backends are also checked to return identical forests.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

import mcforest.forest as forest_mod
import mcforest.inference as inference_mod
from mcforest import _core
from mcforest._core import _pure
from mcforest.criterion import CriterionConfig
from mcforest.data import FeatureMeta, Sample
from mcforest.forest import ForestConfig, build_forest


class _Backend:
    """Namespace exposing one backend under the ``_core`` attribute names."""

    def __init__(self, impl, name):
        self.grow_tree = impl.grow_tree
        self.apply_tree = impl.apply_tree
        self.knn_moments = impl.knn_moments
        self.BACKEND = name


def _sample(n, p, seed=0):
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.normal(size=(n, p)), rng.integers(0, 6, n)])
    feats = [FeatureMeta(f"x{u}") for u in range(p)] + [FeatureMeta("cat", "unordered", list("abcdef"))]
    d = (rng.random(n) < 1 / (1 + np.exp(-x[:, 0]))).astype(np.int64)
    y = x[:, 0] + d * (1 + x[:, 1]) + rng.normal(size=n)
    return Sample(y, d, x, feats, 2)


def _best(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def _with_backend(backend, fn):
    saved = (forest_mod._core, inference_mod._core)
    forest_mod._core = inference_mod._core = backend
    try:
        return fn()
    finally:
        forest_mod._core, inference_mod._core = saved


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=2000)
    ap.add_argument("--p", type=int, default=5)
    ap.add_argument("--trees", type=int, default=20)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)

    if _core.BACKEND != "cython":
        print("compiled extension not available; only the numpy backend can be timed")
        return 1
    from mcforest._core import _fast

    backends = {"numpy": _Backend(_pure, "python"), "cython": _Backend(_fast, "cython")}
    s = _sample(args.n, args.p)
    cfg = ForestConfig(n_trees=args.trees, criterion=CriterionConfig("one_f_mce", True), seed=1)
    rng = np.random.default_rng(2)
    w = rng.normal(size=args.n)
    y = rng.normal(size=args.n)
    k = max(1, int(round(2 * np.sqrt(args.n))))

    results = {}
    forests = {}
    for name, be in backends.items():
        t_grow, forests[name] = _best(lambda: _with_backend(be, lambda: build_forest(s, cfg)), args.repeat)
        f = forests[name]
        t_apply, _ = _best(lambda: _with_backend(be, lambda: f.route(s.x)), args.repeat)
        t_knn, _ = _best(lambda: be.knn_moments(w, y, k), args.repeat)
        results[name] = (t_grow, t_apply, t_knn)

    same = all(a.structure() == b.structure() for a, b in zip(forests["numpy"].trees, forests["cython"].trees))
    print(f"n={args.n}, p={args.p + 1}, trees={args.trees}, best of {args.repeat}; identical forests: {same}")
    print(f"{'kernel':<22}{'numpy [s]':>12}{'cython [s]':>12}{'speed-up':>10}")
    for i, label in enumerate(["forest growth", "routing", f"k-NN moments (k={k})"]):
        a, b = results["numpy"][i], results["cython"][i]
        print(f"{label:<22}{a:>12.4f}{b:>12.4f}{a / b:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
