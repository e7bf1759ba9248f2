"""Exchangeable linkage error (ELE) model.

Within an (area, block) cell of ``N`` register units the linked response
vector is a latent permutation of the true one.  A record is correctly
linked with probability ``lam`` and linked to any specific other record of
the cell with probability ``gamma = (1 - lam) / (N - 1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq

from .exceptions import DegenerateCellError, InputError

__all__ = [
    "BlockSpec",
    "CellIndex",
    "PermutationDraw",
    "AuditSample",
    "gamma",
    "expected_sampled_permutation",
    "corrected_design",
    "linkage_variance_diag",
    "group_moments",
    "linkage_variance",
    "sample_ele_permutation",
    "estimate_lambda_audit",
]


@dataclass(frozen=True)
class BlockSpec:
    """Correct-linkage probability of one block and the cells it spans.

    ``cells`` maps an area label to ``(N_iq, n_iq)``.
    """

    block_id: object
    lam: float
    cells: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise InputError(f"lambda for block {self.block_id!r} outside [0, 1]: {self.lam}")
        for area, (N, n) in self.cells.items():
            if N < 1 or n < 0 or n > N:
                raise InputError(f"invalid cell sizes (N={N}, n={n}) for area {area!r}")

    def effective_lambda(self, N):
        """Lambda actually used in a cell of size ``N`` (1 when ``N == 1``)."""
        return 1.0 if N < 2 else self.lam


@dataclass(frozen=True)
class CellIndex:
    """Row indices of one (area, block) cell.

    ``sample_rows`` index the sample arrays; ``population_rows`` index the
    population arrays, and ``sample_positions`` locate the sampled units
    within ``population_rows``.
    """

    area_id: object
    block_id: object
    sample_rows: np.ndarray
    population_rows: np.ndarray
    sample_positions: np.ndarray | None = None

    @property
    def N(self):
        return len(self.population_rows)

    @property
    def n(self):
        return len(self.sample_rows)


@dataclass(frozen=True)
class PermutationDraw:
    """One realisation of the cell permutation: ``y_star = y[perm]``."""

    perm: np.ndarray
    block_id: object = None
    area_id: object = None

    @property
    def fixed_points(self):
        return int(np.sum(self.perm == np.arange(len(self.perm))))


@dataclass(frozen=True)
class AuditSample:
    """Clerical review of linked records: ``correct[q]`` of ``m[q]`` were right."""

    block_ids: tuple
    m: np.ndarray
    correct: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m)
        c = np.asarray(self.correct)
        if m.shape != c.shape or m.shape != (len(self.block_ids),):
            raise InputError("audit arrays must have one entry per block")
        if np.any(c < 0) or np.any(c > m):
            raise InputError("audit counts must satisfy 0 <= correct <= m")


def gamma(lam, N):
    """Probability of a link to one specific wrong record, ``(1-lam)/(N-1)``.

    Raises
    ------
    DegenerateCellError
        If ``N < 2``; such cells admit no wrong link and callers must use
        ``lam = 1`` instead.
    """
    N = np.asarray(N)
    if np.any(N < 2):
        raise DegenerateCellError("gamma is undefined for cells with fewer than 2 units")
    out = (1.0 - np.asarray(lam, dtype=float)) / (N - 1)
    return float(out) if out.ndim == 0 else out


def _lam_gamma(lam, N):
    """Vectorised (lambda, gamma) pair with singleton cells forced to lambda=1."""
    lam = np.asarray(lam, dtype=float)
    N = np.asarray(N, dtype=float)
    lam = np.where(N < 2, 1.0, lam)
    g = np.where(N < 2, 0.0, (1.0 - lam) / np.maximum(N - 1.0, 1.0))
    return lam, g


def expected_sampled_permutation(cell, lam):
    """Expected sampled rows of the cell permutation matrix.

    Parameters
    ----------
    cell : CellIndex or tuple (n, N)
        Cell whose sampled rows are requested.  With a ``CellIndex`` the
        columns follow ``population_rows`` and the identity part sits at
        ``sample_positions`` (the first ``n`` columns if not given).
    lam : float
        Correct-linkage probability of the block.

    Returns
    -------
    ndarray, shape (n, N)
        ``(lam - gamma) [I | 0] + gamma 1 1'``; every row sums to one.
    """
    if isinstance(cell, CellIndex):
        n, N = cell.n, cell.N
        pos = cell.sample_positions
    else:
        n, N = cell
        pos = None
    if n > N:
        raise InputError("sample larger than cell population")
    if pos is None:
        pos = np.arange(n)
    lam_e, g = _lam_gamma(lam, N)
    T = np.full((n, N), float(g))
    T[np.arange(n), np.asarray(pos)] += float(lam_e) - float(g)
    return T


def corrected_design(X_s, xbar, lam, N):
    """Linkage-corrected design ``(lam-gamma) X_s + gamma N 1 xbar'``.

    ``xbar`` holds the population column means of the cell.  ``lam`` and
    ``N`` may be scalars (one cell) or per-row arrays, in which case
    ``xbar`` must be one row per sample unit.
    """
    X_s = np.asarray(X_s, dtype=float)
    xbar = np.asarray(xbar, dtype=float)
    if xbar.shape[-1] != X_s.shape[-1]:
        raise InputError(
            f"xbar width {xbar.shape[-1]} does not match design width {X_s.shape[-1]}"
        )
    lam_e, g = _lam_gamma(lam, N)
    N = np.broadcast_to(np.asarray(N, dtype=float), lam_e.shape)
    if lam_e.ndim:
        lam_e, g, N = lam_e[:, None], g[:, None], N[:, None]
    return (lam_e - g) * X_s + g * N * xbar


def linkage_variance_diag(f, fbar, fbar2, lam):
    """Diagonal approximation of the linkage variance of ``(A_s X beta)_j``.

    ``v_j = (1-lam) * (lam (f_j - fbar)^2 + fbar2 - fbar^2)`` with ``fbar``
    and ``fbar2`` the block averages of the fitted values and their squares.
    """
    f = np.asarray(f, dtype=float)
    spread = np.asarray(fbar2, dtype=float) - np.asarray(fbar, dtype=float) ** 2
    tol = 1e-12 * np.maximum(1.0, np.asarray(fbar2, dtype=float))
    if np.any(spread < -tol):
        raise InputError("second moment smaller than squared mean (fbar2 < fbar**2)")
    spread = np.maximum(spread, 0.0)
    lam = np.asarray(lam, dtype=float)
    return (1.0 - lam) * (lam * (f - fbar) ** 2 + spread)


def group_moments(f, groups, n_groups=None):
    """Per-group mean of ``f`` and of ``f**2``, broadcast back to the units."""
    groups = np.asarray(groups)
    cnt = np.bincount(groups, minlength=n_groups or 0).astype(float)
    cnt[cnt == 0] = 1.0
    m1 = np.bincount(groups, weights=f, minlength=len(cnt)) / cnt
    m2 = np.bincount(groups, weights=f * f, minlength=len(cnt)) / cnt
    return m1[groups], m2[groups]


def linkage_variance(f, groups, lam_unit):
    """``linkage_variance_diag`` with moments pooled within ``groups``."""
    fbar, fbar2 = group_moments(f, groups)
    return linkage_variance_diag(f, fbar, fbar2, lam_unit)


def _uniform_derangement(k, rng):
    # rejection from uniform permutations, acceptance rate -> 1/e
    while True:
        p = rng.permutation(k)
        if not np.any(p == np.arange(k)):
            return p


@lru_cache(maxsize=1024)
def _keep_probability(N, lam):
    # a lone marked unit keeps its record, so P(fixed) = rho + (1-rho) rho^(N-1);
    # solve for the keep probability rho that makes this equal lam
    if lam <= 0.0:
        return 0.0
    return brentq(lambda r: r + (1.0 - r) * r ** (N - 1) - lam, 0.0, lam, xtol=1e-15)


def sample_ele_permutation(N, lam, rng, block_id=None, area_id=None):
    """Draw a cell permutation with exact ELE marginals.

    Each unit is independently marked as mislinked, and two or more marked
    units are rearranged by a uniform derangement while a single marked unit
    keeps its own record.  The marking probability is calibrated so that
    ``P(unit keeps its record) = lam`` exactly; by symmetry every wrong
    record then has probability ``(1-lam)/(N-1)``.
    """
    if N < 1:
        raise InputError("cell size must be positive")
    perm = np.arange(N)
    if lam >= 1.0 or N < 2:
        return PermutationDraw(perm, block_id, area_id)
    marked = np.flatnonzero(rng.random(N) >= _keep_probability(int(N), float(lam)))
    if len(marked) >= 2:
        perm[marked] = marked[_uniform_derangement(len(marked), rng)]
    return PermutationDraw(perm, block_id, area_id)


def estimate_lambda_audit(audit, variance="binomial", n_linked=None):
    """Estimate correct-linkage rates from an audit sample.

    Parameters
    ----------
    audit : AuditSample
    variance : {"binomial", "sample-total"}
        ``"binomial"`` returns ``lam(1-lam)/m``.  ``"sample-total"`` returns
        ``n_linked * lam(1-lam)``, where ``n_linked`` is the number of
        linked sample records per block.
    n_linked : array-like, optional
        Required for ``variance="sample-total"``.

    Returns
    -------
    lam_hat, var_hat : ndarray
    """
    m = np.asarray(audit.m, dtype=float)
    if np.any(m < 1):
        raise InputError("every block needs at least one audited record")
    lam_hat = np.asarray(audit.correct, dtype=float) / m
    if variance == "binomial":
        var_hat = lam_hat * (1.0 - lam_hat) / m
    elif variance == "sample-total":
        if n_linked is None:
            raise InputError("variance='sample-total' needs the per-block linked sample sizes")
        var_hat = np.asarray(n_linked, dtype=float) * lam_hat * (1.0 - lam_hat)
    else:
        raise InputError(f"unknown audit variance form {variance!r}")
    return lam_hat, var_hat
