"""Nearest-neighbour outcomes in every other treatment arm.

Distances use a diagonal Mahalanobis metric (inverse feature variances on
the diagonal). Unordered features enter as one-hot indicator columns.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import DataError, Sample

_CHUNK = 128


@dataclass(frozen=True)
class FeatureScale:
    inv_var: np.ndarray


@dataclass(frozen=True)
class MatchedOutcomes:
    ytilde: np.ndarray  # (n, M)


def design_matrix(sample: Sample) -> np.ndarray:
    """Ordered features as-is, unordered features expanded to indicators."""
    cols = []
    for u, f in enumerate(sample.features):
        col = sample.x[:, u]
        if f.is_unordered:
            for c in range(len(f.categories)):
                cols.append((col == c).astype(np.float64))
        else:
            cols.append(col)
    if not cols:
        return np.zeros((sample.n, 0))
    return np.column_stack(cols)


def feature_scales(sample: Sample) -> FeatureScale:
    """Inverse population variances of the design columns; constant columns get weight 0."""
    z = design_matrix(sample)
    var = z.var(axis=0) if sample.n else np.zeros(z.shape[1])
    inv = np.zeros_like(var)
    pos = var > 0
    inv[pos] = 1.0 / var[pos]
    return FeatureScale(inv)


def match_outcomes(sample: Sample, scales: FeatureScale) -> MatchedOutcomes:
    """For each row and each other arm, the outcome of the closest row in that arm.

    Ties in distance go to the lowest row index. Donors may be reused.
    """
    z = design_matrix(sample)
    w = scales.inv_var
    if z.shape[1] != w.shape[0]:
        raise DataError("feature scale does not match the sample's design matrix")
    M = sample.n_treatments
    yt = np.empty((sample.n, M), dtype=np.float64)
    for m in range(M):
        donors = np.flatnonzero(sample.d == m)
        if donors.size == 0:
            raise DataError(f"treatment arm {m} is empty; cannot match")
        zd = z[donors]
        for start in range(0, sample.n, _CHUNK):
            stop = min(start + _CHUNK, sample.n)
            dist = np.zeros((stop - start, donors.size))
            for u in range(z.shape[1]):
                if w[u] == 0.0:
                    continue
                diff = z[start:stop, u][:, None] - zd[:, u][None, :]
                dist += w[u] * (diff * diff)
            # argmin returns the first minimum, i.e. the lowest donor row id
            yt[start:stop, m] = sample.y[donors[np.argmin(dist, axis=1)]]
        own = sample.d == m
        yt[own, m] = sample.y[own]
    return MatchedOutcomes(yt)
