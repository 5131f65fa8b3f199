"""Isotonic regression via pool adjacent violators."""

from __future__ import annotations

import numpy as np


def pool_adjacent_violators(y, weights=None) -> np.ndarray:
    """Weighted least-squares nondecreasing fit to ``y`` (already in x order)."""
    y = np.asarray(y, dtype=float)
    n = y.size
    if n == 0:
        return y.copy()
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)

    # stack of blocks: (weighted mean, total weight, length)
    means: list[float] = []
    wts: list[float] = []
    lens: list[int] = []
    for i in range(n):
        m, wt, ln = y[i], w[i], 1
        while means and means[-1] > m:
            pm, pw, pl = means.pop(), wts.pop(), lens.pop()
            tot = pw + wt
            m = (pm * pw + m * wt) / tot
            wt = tot
            ln += pl
        means.append(m)
        wts.append(wt)
        lens.append(ln)
    return np.repeat(means, lens)


def fit_knots(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    """Fit a monotone map score -> mean label; return (knot_x, knot_y).

    Equal scores are pre-averaged into a single point weighted by multiplicity.
    Knots keep only the end points of each pooled block, which leaves the
    linearly interpolated map unchanged.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=float)
    ux, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    sums = np.bincount(inverse, weights=y, minlength=ux.size)
    fitted = pool_adjacent_violators(sums / counts, counts)

    keep = np.ones(ux.size, dtype=bool)
    if ux.size > 2:
        same_prev = fitted[1:-1] == fitted[:-2]
        same_next = fitted[1:-1] == fitted[2:]
        keep[1:-1] = ~(same_prev & same_next)
    return ux[keep], np.clip(fitted[keep], 0.0, 1.0)


def interpolate(knot_x, knot_y, query) -> np.ndarray:
    """Piecewise-linear interpolation, clamped to the end knot values."""
    q = np.asarray(query, dtype=float)
    kx = np.asarray(knot_x, dtype=float)
    ky = np.asarray(knot_y, dtype=float)
    if kx.size == 1:
        return np.full(q.shape, ky[0])
    return np.interp(q, kx, ky, left=ky[0], right=ky[-1])
