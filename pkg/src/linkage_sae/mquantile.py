"""Linkage-corrected linear M-quantile regression and the M-quantile predictor."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.optimize import brentq
from sklearn.base import BaseEstimator
from sklearn.isotonic import isotonic_regression

from ._validation import check_is_fitted, check_tau, check_tuning_constant
from .exceptions import ConvergenceError, InputError
from .lmm import _as_sample
from .robust import huber_psi, huber_psi_prime, huber_weights

__all__ = [
    "DEFAULT_GRID",
    "psi_tau",
    "MQTauFit",
    "MQGridFit",
    "MQCoefficients",
    "fit_mq_tau",
    "fit_mq_grid",
    "mq_coefficients",
    "fit_area_quantiles",
    "predict_means_mq_star",
    "mse_mq_star",
    "MQStar",
]

DEFAULT_GRID = np.round(np.arange(1, 50) * 0.02, 10)


def _tilt(r, tau):
    return np.where(r > 0, tau, 1.0 - tau)


def psi_tau(r, tau, c):
    """Tilted Huber influence ``2 psi(r) (tau if r > 0 else 1 - tau)``."""
    return 2.0 * huber_psi(r, c) * _tilt(r, tau)


def _tau_weights(r, tau, c):
    return 2.0 * huber_weights(r, c) * _tilt(r, tau)


@dataclass(frozen=True, eq=False)
class MQTauFit:
    """Fit at one quantile order.  ``upsilon`` is the per-unit scale diagonal."""

    tau: float
    beta: np.ndarray
    sigma2: float
    upsilon: np.ndarray
    n_iter: int
    equation_norm: float


_SECANT_STEPS = 10


def _upsilon(sample, beta, sigma2):
    return sigma2 + sample.linkage_variance(beta)


def fit_mq_tau(sample, tau, c=1.345, beta0=None, sigma20=None, max_iter=200, tol=1e-6):
    """M-quantile regression of order ``tau`` on the corrected design.

    Iterates weighted least squares for ``beta`` (weights ``psi_tau(r)/r``
    divided by the scale diagonal ``Upsilon``), the weighted scale
    ``sigma2 = sum w e^2 / sum w`` and ``Upsilon = sigma2 + v(beta)``.

    Returns
    -------
    MQTauFit

    Raises
    ------
    ConvergenceError
    """
    tau = check_tau(tau)
    c = check_tuning_constant(c)
    X, y = sample.X_star, sample.y
    if beta0 is None:
        beta = np.linalg.lstsq(X, y, rcond=None)[0]
        e = y - X @ beta
        sigma2 = (np.median(np.abs(e)) / 0.6745) ** 2
    else:
        beta = np.asarray(beta0, dtype=float).copy()
        sigma2 = float(sigma20)
    sigma2 = max(sigma2, 1e-12)

    def inner(s2, beta):
        # beta at fixed scale: weighted least squares to convergence
        for _ in range(max(max_iter, 500)):
            ups = _upsilon(sample, beta, s2)
            q = _tau_weights((y - X @ beta) / np.sqrt(ups), tau, c) / ups
            Xq = X * q[:, None]
            nb = np.linalg.solve(Xq.T @ X, Xq.T @ y)
            done = np.max(np.abs(nb - beta)) < 1e-12 * (1.0 + np.max(np.abs(beta)))
            beta = nb
            if done:
                break
        return beta

    def scale(s2, beta):
        ups = _upsilon(sample, beta, s2)
        e = y - X @ beta
        w = _tau_weights(e / np.sqrt(ups), tau, c)
        return max(np.sum(w * e * e) / np.sum(w), 1e-12)

    # solving beta fully before each scale update keeps the outer map
    # contractive; a joint single-step update can cycle at extreme orders.
    # The outer map is one-dimensional, so secant steps on g(s2) = T(s2) - s2
    # replace the plain update while they stay positive.  tr(W) jumps when a
    # residual changes sign, so g may step over zero without a root; once a
    # sign change is bracketed and the secant phase stalls, brentq locates
    # the root or the jump.
    lo = hi = None
    prev = None
    change = np.inf
    converged = False
    for it in range(1, max_iter + 1):
        beta = inner(sigma2, beta)
        new_sigma2 = scale(sigma2, beta)
        gap = new_sigma2 - sigma2
        change = abs(gap) / (1.0 + sigma2)
        if change < tol:
            sigma2 = new_sigma2
            converged = True
            break
        if gap > 0:
            lo = sigma2 if lo is None else max(lo, sigma2)
        else:
            hi = sigma2 if hi is None else min(hi, sigma2)
        if lo is not None and hi is not None and lo < hi and it >= _SECANT_STEPS:
            break
        step = new_sigma2
        if prev is not None and gap != prev[1]:
            trial = sigma2 - gap * (sigma2 - prev[0]) / (gap - prev[1])
            if trial > 0:
                step = trial
        prev = (sigma2, gap)
        sigma2 = step
    if not converged:
        g = lambda s2: scale(s2, inner(s2, beta)) - s2  # noqa: E731
        if lo is None or hi is None or not lo < hi:
            lo, hi = sigma2 / 4.0, sigma2 * 4.0
            if not (g(lo) > 0 > g(hi)):
                raise ConvergenceError(
                    f"M-quantile fit at tau={tau} did not converge",
                    last_iterate=np.append(beta, sigma2),
                    norms={"change": float(change)},
                )
        sigma2 = brentq(g, lo, hi, xtol=tol * (1.0 + sigma2))
    beta = inner(sigma2, beta)
    ups = _upsilon(sample, beta, sigma2)
    return MQTauFit(tau, beta, sigma2, ups, it, normal_equation_norm(sample, beta, ups, tau, c))


def normal_equation_norm(sample, beta, ups, tau, c):
    """``|sum_j x*_j psi_tau(r_j)/sqrt(Upsilon_j)| / (1 + sum |.|)``, sup over columns."""
    X = sample.X_star
    r = (sample.y - X @ beta) / np.sqrt(ups)
    t = X * (psi_tau(r, tau, c) / np.sqrt(ups))[:, None]
    return float(np.max(np.abs(t.sum(axis=0)) / (1.0 + np.abs(t).sum(axis=0))))


@dataclass(frozen=True, eq=False)
class MQGridFit:
    """Fits over a strictly increasing grid of quantile orders."""

    taus: np.ndarray
    betas: np.ndarray
    sigma2: np.ndarray
    converged: np.ndarray
    fits: tuple = field(default=(), repr=False)

    def index_function(self, X):
        """Raw fitted quantiles ``X beta_tau``, shape ``(n, G)``."""
        return X @ self.betas.T


def fit_mq_grid(sample, taus=None, c=1.345, tol=1e-6, max_iter=200):
    """Fit the grid with warm starts moving outwards from the median order."""
    taus = DEFAULT_GRID if taus is None else np.asarray(taus, dtype=float)
    if np.any(np.diff(taus) <= 0) or taus[0] <= 0 or taus[-1] >= 1:
        raise InputError("tau grid must be strictly increasing inside (0, 1)")
    G = len(taus)
    fits = [None] * G
    mid = int(np.argmin(np.abs(taus - 0.5)))
    order = [mid] + list(range(mid + 1, G)) + list(range(mid - 1, -1, -1))
    for k in order:
        if k == mid:
            start = None
        else:
            nb = k - 1 if k > mid else k + 1
            start = fits[nb]
        try:
            fits[k] = fit_mq_tau(
                sample,
                taus[k],
                c,
                None if start is None else start.beta,
                None if start is None else start.sigma2,
                max_iter,
                tol,
            )
        except ConvergenceError:
            fits[k] = None
    ok = np.array([f is not None for f in fits])
    if not ok.any():
        raise ConvergenceError("no M-quantile fit on the grid converged")
    if not ok.all():
        warnings.warn(f"{(~ok).sum()} grid fits did not converge and were dropped", RuntimeWarning)
    keep = np.flatnonzero(ok)
    return MQGridFit(
        taus=taus[keep],
        betas=np.array([fits[k].beta for k in keep]),
        sigma2=np.array([fits[k].sigma2 for k in keep]),
        converged=ok,
        fits=tuple(fits[k] for k in keep),
    )


@dataclass(frozen=True, eq=False)
class MQCoefficients:
    """Unit coefficients before (``tau_starstar``) and after correction."""

    tau_starstar: np.ndarray
    tau_star: np.ndarray
    tau_area: np.ndarray
    clamped: np.ndarray


def monotone_quantiles(Q):
    """Isotonic (non-decreasing) version of every row of ``Q``."""
    Q = np.array(Q, dtype=float)
    bad = np.flatnonzero(np.any(np.diff(Q, axis=1) < 0, axis=1))
    for j in bad:
        Q[j] = isotonic_regression(Q[j], increasing=True)
    return Q


def _invert(yj, qj, taus):
    # strictly increasing support for np.interp: drop flat runs
    keep = np.concatenate([[True], np.diff(qj) > 0])
    return float(np.interp(yj, qj[keep], taus[keep]))


def mq_coefficients(sample, grid, correction="approx"):
    """Unit and area M-quantile coefficients.

    Parameters
    ----------
    sample : LinkedSample
    grid : MQGridFit
    correction : {"approx", "exact"}
        ``tau* = (lam - gamma) tau** + gamma N c_q`` with ``c_q = 0.5``
        (``"approx"``) or the cell mean of ``tau**`` (``"exact"``).
    """
    Q = monotone_quantiles(grid.index_function(sample.X))
    taus = grid.taus
    y = sample.y
    tss = np.array([_invert(y[j], Q[j], taus) for j in range(sample.n)])
    clamped = (y < Q[:, 0]) | (y > Q[:, -1])
    lam, g, N = sample.lam_unit, sample.gamma_unit, sample.N_unit
    if correction == "approx":
        centre = 0.5
    elif correction == "exact":
        cnt = np.bincount(sample.unit_cell, minlength=len(sample.cell_N))
        cm = np.bincount(sample.unit_cell, weights=tss, minlength=len(sample.cell_N)) / np.maximum(cnt, 1)
        centre = cm[sample.unit_cell]
    else:
        raise InputError(f"unknown coefficient correction {correction!r}")
    ts = (lam - g) * tss + g * N * centre
    tau_area = np.bincount(sample.area, weights=ts, minlength=sample.n_areas) / sample.n_area
    return MQCoefficients(tss, ts, tau_area, clamped)


@dataclass(frozen=True, eq=False)
class MQAreaFit:
    """Refits at the area coefficients, one row per area."""

    sample: object
    grid: MQGridFit
    coefficients: MQCoefficients
    tau: np.ndarray
    betas: np.ndarray
    sigma2: np.ndarray
    fits: tuple
    fallback: np.ndarray
    c: float

    @property
    def equation_norms(self):
        return np.array([f.equation_norm for f in self.fits])


def fit_area_quantiles(sample, grid, coefficients, c=1.345, tol=1e-6, max_iter=200):
    """Refit at each area's coefficient, warm-started from the nearest grid fit."""
    fits, fallback = [], np.zeros(sample.n_areas, dtype=bool)
    tau = np.clip(coefficients.tau_area, grid.taus[0], grid.taus[-1])
    cache = {}
    for i, t in enumerate(tau):
        key = float(t)
        if key in cache:
            fits.append(cache[key])
            continue
        k = int(np.argmin(np.abs(grid.taus - t)))
        start = grid.fits[k]
        try:
            f = fit_mq_tau(sample, t, c, start.beta, start.sigma2, max_iter, tol)
        except ConvergenceError:
            warnings.warn(
                f"refit at tau={t:.4f} failed; using the nearest grid order", RuntimeWarning
            )
            f = start
            fallback[i] = True
        cache[key] = f
        fits.append(f)
    return MQAreaFit(
        sample=sample,
        grid=grid,
        coefficients=coefficients,
        tau=np.array([f.tau for f in fits]),
        betas=np.array([f.beta for f in fits]),
        sigma2=np.array([f.sigma2 for f in fits]),
        fits=tuple(fits),
        fallback=fallback,
        c=c,
    )


def predict_means_mq_star(area_fit):
    """``N_i^-1 {n_i ybar*_si + (N_i - n_i) xbar*_ri' beta_{tau_i}}``."""
    s = area_fit.sample
    N = s.N_area.astype(float)
    n = s.n_area.astype(float)
    synth = np.einsum("ia,ia->i", s.xbar_r_star, area_fit.betas)
    return (n * s.ybar_s + (N - n) * synth) / N


def mse_mq_star(area_fit):
    """Linearisation MSE: variance, squared bias and coefficient uncertainty.

    Returns a DataFrame with ``variance, bias2, v_tau, mse``.
    """
    s = area_fit.sample
    c = area_fit.c
    X, y = s.X_star, s.y
    n, p, D = s.n, s.p, s.n_areas
    N = s.N_area.astype(float)
    n_i = s.n_area.astype(float)
    Nr = N - n_i
    f = n_i / N
    # residuals at each unit's own area order
    own = np.einsum("ja,ja->j", X, area_fit.betas[s.area])
    res = y - own
    with np.errstate(divide="ignore", invalid="ignore"):
        ve = np.where(Nr > 0, np.sum(res**2) / (Nr * (n - 1.0)), 0.0)
    # cell population means of the register covariates, per area
    xbar_cells = s.cell_xbar
    cell_area = s.cell_area
    ts = area_fit.coefficients.tau_star
    v2 = (
        np.bincount(s.area, weights=(ts - area_fit.coefficients.tau_area[s.area]) ** 2, minlength=D)
        / n_i
    )
    variance = np.zeros(D)
    bias = np.zeros(D)
    vtau = np.zeros(D)
    for i in range(D):
        fi = area_fit.fits[i]
        tau = fi.tau
        ups = fi.upsilon
        e = y - X @ fi.beta
        r = e / np.sqrt(ups)
        psi_p = 2.0 * huber_psi_prime(r, c) * _tilt(r, tau)
        phi = psi_tau(r, tau, c) ** 2
        H_psi = (X * (psi_p / ups)[:, None]).T @ X
        H_phi = (X * (phi / ups)[:, None]).T @ X
        Hinv = np.linalg.pinv(H_psi)
        Vb = n / (n - p) * Hinv @ H_phi @ Hinv.T
        xr = s.xbar_r_star[i]
        variance[i] = (1 - f[i]) ** 2 * (xr @ Vb @ xr + ve[i])
        # pseudo-linear bias weights over the whole sample
        wq = _tau_weights(r, tau, c) / ups
        Xw = X * wq[:, None]
        H = Xw.T @ X
        b = Xw @ np.linalg.solve(H, Nr[i] * xr)
        w = b + (s.area == i)
        bias[i] = (np.sum(w * own) - N[i] * (s.xbar_area[i] @ fi.beta)) / N[i]
        # coefficient-uncertainty term
        with np.errstate(divide="ignore", invalid="ignore"):
            dW = np.where(r != 0, 2.0 * np.abs(huber_psi(r, c)) / r, 0.0)
        dq = dW / ups
        dH = (X * dq[:, None]).T @ X
        dL = (X * dq[:, None]).T @ y
        L = Xw.T @ y
        G = np.linalg.solve(H, dL - dH @ np.linalg.solve(H, L)) / n
        xq = xbar_cells[cell_area == i]
        vtau[i] = np.sum((xq @ G) ** 2) * v2[i]
    out = {}
    if np.any(variance < -1e-10):
        warnings.warn("negative variance clamped to zero", RuntimeWarning)
    out["variance"] = np.maximum(variance, 0.0)
    out["bias2"] = bias**2
    out["v_tau"] = np.maximum(vtau, 0.0)
    out["mse"] = out["variance"] + out["bias2"] + out["v_tau"]
    return pd.DataFrame(out)


class MQStar(BaseEstimator):
    """Linkage-corrected M-quantile predictor of small-area means.

    Parameters
    ----------
    c : float
        Huber tuning constant.
    taus : array-like, optional
        Quantile grid (default 0.02, 0.04, ..., 0.98).
    correct_linkage : bool
        False gives the classical M-quantile predictor.
    correction : {"approx", "exact"}
        Centre of the coefficient correction (0.5 or the cell mean).
    """

    def __init__(self, c=1.345, taus=None, correct_linkage=True, correction="approx", tol=1e-6, max_iter=200):
        self.c = c
        self.taus = taus
        self.correct_linkage = correct_linkage
        self.correction = correction
        self.tol = tol
        self.max_iter = max_iter

    @property
    def name(self):
        return "*MQ" if self.correct_linkage else "MQ"

    def fit(self, X, y=None, **sample_kw):
        sample = _as_sample(X, y, **sample_kw)
        if not self.correct_linkage:
            sample = sample.perfect_linkage()
        self.sample_ = sample
        grid = fit_mq_grid(sample, self.taus, self.c, self.tol, self.max_iter)
        coefs = mq_coefficients(sample, grid, self.correction)
        self.grid_ = grid
        self.coefficients_ = coefs
        self.fit_ = fit_area_quantiles(sample, grid, coefs, self.c, self.tol, self.max_iter)
        return self

    def predict(self, X=None):
        check_is_fitted(self)
        return predict_means_mq_star(self.fit_)

    def mse(self):
        check_is_fitted(self)
        return mse_mq_star(self.fit_)

    def coefficient_frame(self):
        check_is_fitted(self)
        s, co = self.sample_, self.coefficients_
        return pd.DataFrame(
            {
                "area_id": s.area_labels[s.area],
                "block_id": s.block_labels[s.block],
                "tau_starstar": co.tau_starstar,
                "tau_star": co.tau_star,
                "clamped": co.clamped,
            }
        )

    def summary(self):
        check_is_fitted(self)
        fit = self.fit_
        return {
            "estimator": self.name,
            "huber_c": float(self.c),
            "grid_size": int(len(self.grid_.taus)),
            "grid_failures": int((~self.grid_.converged).sum()),
            "area_tau": [float(t) for t in fit.tau],
            "refit_fallbacks": int(fit.fallback.sum()),
            "max_equation_norm": float(fit.equation_norms.max()),
        }
