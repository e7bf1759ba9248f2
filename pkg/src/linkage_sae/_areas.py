"""Area-blocked linear algebra for the random-intercept covariance."""
from __future__ import annotations

import numpy as np


class AreaBlocks:
    """Sampled units grouped by area, with areas batched by sample size.

    Every area contributes an ``n_i x n_i`` covariance block.  Areas of equal
    size are stacked so that inverses and quadratic forms run as batched
    numpy calls.
    """

    def __init__(self, area, n_areas):
        area = np.asarray(area)
        counts = np.bincount(area, minlength=n_areas)
        order = np.argsort(area, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        self.groups = []
        for m in np.unique(counts):
            if m == 0:
                continue
            ids = np.flatnonzero(counts == m)
            rows = order[starts[ids][:, None] + np.arange(m)]
            self.groups.append((ids, rows))
        self.n_areas = n_areas
        self.n = len(area)

    def gather(self, v):
        """``v`` indexed by unit, split into per-group ``(D_g, m, ...)`` arrays."""
        return [v[rows] for _, rows in self.groups]

    def scatter(self, parts, shape=()):
        """Per-group per-area values back into a ``(D, *shape)`` array."""
        out = np.zeros((self.n_areas,) + tuple(shape))
        for (ids, _), part in zip(self.groups, parts):
            out[ids] = part
        return out

    def scatter_units(self, parts):
        """Per-group per-unit values back into a unit-indexed vector."""
        out = np.zeros(self.n)
        for (_, rows), part in zip(self.groups, parts):
            out[rows] = part
        return out

    def covariances(self, s2u, d):
        """``s2u J + diag(d)`` per area."""
        out = []
        for dg in self.gather(d):
            m = dg.shape[1]
            S = np.full((dg.shape[0], m, m), float(s2u))
            S[:, np.arange(m), np.arange(m)] += dg
            out.append(S)
        return out


def batched_inv(S):
    return np.linalg.inv(S)


def sym(A):
    return 0.5 * (A + np.swapaxes(A, -1, -2))


def diag_embed(d):
    m = d.shape[-1]
    out = np.zeros(d.shape + (m,))
    out[..., np.arange(m), np.arange(m)] = d
    return out
