"""Robust (Huber) random-intercept model for linked data and its REBLUP.

Fixed effects solve a Fellner-type equation with standardized residuals
``r = U^-1/2 (y* - X* beta)`` (``U`` the diagonal of the area covariance),
area effects solve the penalised Huber equation per area, and variance
components solve Richardson-Welsh Proposal II equations.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import norm
from sklearn.base import BaseEstimator

from ._areas import AreaBlocks
from ._validation import check_is_fitted, check_tuning_constant
from .exceptions import ConvergenceError, InputError
from .lmm import _as_sample, _initial, fit_lmm_linked, synthetic_means

__all__ = [
    "huber_psi",
    "huber_psi_prime",
    "huber_weights",
    "k_const",
    "RobustConfig",
    "RobustFit",
    "fit_reblup_star",
    "estimating_equations",
    "predict_means_reblup_star",
    "sandwich_cov",
    "v_delta_robust",
    "mse_reblup_star",
    "REBLUPStar",
]


def huber_psi(u, c):
    """Huber influence function ``u * min(1, c/|u|)``."""
    return np.clip(u, -c, c)


def huber_psi_prime(u, c):
    return (np.abs(u) < c).astype(float)


def huber_weights(u, c):
    """``psi(u)/u`` with the analytic limit 1 near zero."""
    u = np.asarray(u, dtype=float)
    au = np.abs(u)
    out = np.ones_like(u)
    big = au >= 1e-10
    out[big] = np.minimum(1.0, c / au[big])
    return out


def k_const(c):
    """``E psi_c(R)^2`` for standard normal ``R``."""
    if np.isinf(c):
        return 1.0
    return float(2 * norm.cdf(c) - 1 - 2 * c * norm.pdf(c) + 2 * c * c * norm.sf(c))


@dataclass(frozen=True)
class RobustConfig:
    """Tuning of the robust fit.

    ``c`` is the Huber constant; ``tol`` bounds the sup-norm change of the
    parameters between outer iterations.
    """

    c: float = 1.345
    max_iter: int = 500
    tol: float = 1e-7
    inner_tol: float = 1e-11

    def __post_init__(self):
        check_tuning_constant(self.c)

    @property
    def K(self):
        return k_const(self.c)


@dataclass(frozen=True, eq=False)
class RobustFit:
    """Solution of the robust estimating equations.

    ``v`` is the linkage variance frozen at the final iterate; ``w2`` and
    ``w3`` are the unit and area Huber weights of the area-effect equation.
    """

    sample: object
    beta: np.ndarray
    u: np.ndarray
    delta: np.ndarray
    v: np.ndarray
    config: RobustConfig
    n_iter: int
    residual_norms: dict = field(default_factory=dict)
    w2: np.ndarray = None
    w3: np.ndarray = None

    @property
    def boundary(self):
        return bool(self.delta[0] <= 0.0)

    @property
    def blocks(self):
        return AreaBlocks(self.sample.area, self.sample.n_areas)


# -- building blocks ---------------------------------------------------------


def _beta_irls(blocks, Xg, yg, Sinv, sqrtU, c, beta, tol, max_iter=500):
    for _ in range(max_iter):
        lhs = 0.0
        rhs = 0.0
        for X, y, Si, su in zip(Xg, yg, Sinv, sqrtU):
            r = (y - X @ beta) / su
            w = huber_weights(r, c)
            SW = Si * w[:, None, :]
            lhs = lhs + np.einsum("gja,gjk,gkb->ab", X, SW, X)
            rhs = rhs + np.einsum("gja,gjk,gk->a", X, SW, y)
        new = np.linalg.solve(lhs, rhs)
        done = np.max(np.abs(new - beta) / (1.0 + np.abs(beta))) < tol
        beta = new
        if done:
            return beta
    raise ConvergenceError("robust fixed-effect iteration did not converge", last_iterate=beta)


def _area_effects(blocks, e, s2, s2u, c, tol, max_iter=500):
    """Solve the per-area Huber equation for the random intercepts."""
    D = blocks.n_areas
    if s2u <= 0.0:
        return np.zeros(D), np.ones(blocks.n), np.ones(D)
    su = np.sqrt(s2u)
    eg, sg = blocks.gather(e), blocks.gather(s2)
    u = [np.zeros(x.shape[0]) for x in eg]
    for _ in range(max_iter):
        moved = 0.0
        for k, (ee, ss) in enumerate(zip(eg, sg)):
            t = (ee - u[k][:, None]) / np.sqrt(ss)
            w2 = huber_weights(t, c)
            w3 = huber_weights(u[k] / su, c)
            new = np.sum(w2 * ee / ss, axis=1) / (np.sum(w2 / ss, axis=1) + w3 / s2u)
            moved = max(moved, np.max(np.abs(new - u[k]) / (1.0 + np.abs(u[k]))))
            u[k] = new
        if moved < tol:
            break
    else:
        raise ConvergenceError("robust area-effect iteration did not converge")
    u = blocks.scatter(u)
    t = (e - u[_unit_area(blocks)]) / np.sqrt(s2)
    return u, huber_weights(t, c), huber_weights(u / su, c)


def _unit_area(blocks):
    out = np.empty(blocks.n, dtype=np.intp)
    for ids, rows in blocks.groups:
        out[rows] = ids[:, None]
    return out


def _delta_pieces(blocks, e, s2u, s2e, v, c, K):
    """Per-area terms of the variance-component equations.

    Returns per-area arrays ``a (D, 2)``, ``t (D, 2)`` (so the equation is
    ``sum(a - K t)``), plus ``A (2, 2)`` and ``cv (2,)`` of the
    fixed-point form ``A delta = sum(a) - cv``.
    """
    S = blocks.covariances(s2u, s2e + v)
    a_parts, t_parts = [], []
    A = np.zeros((2, 2))
    cv = np.zeros(2)
    for (ids, rows), Sg in zip(blocks.groups, S):
        Si = np.linalg.inv(Sg)
        U = s2u + s2e + v[rows]
        r = e[rows] / np.sqrt(U)
        phi = np.sqrt(U) * huber_psi(r, c)
        Sphi = np.einsum("gjk,gk->gj", Si, phi)
        a = np.column_stack([Sphi.sum(axis=1) ** 2, np.sum(Sphi**2, axis=1)])
        one = Si.sum(axis=2)
        t = np.column_stack([one.sum(axis=1), np.trace(Si, axis1=1, axis2=2)])
        a_parts.append(a)
        t_parts.append(t)
        # tr(S dl S dk) for dl, dk in {J, I}
        jj = np.sum(one.sum(axis=1) ** 2)
        ji = np.sum(one**2)
        ii = np.einsum("gjk,gkj->", Si, Si)
        A += K * np.array([[jj, ji], [ji, ii]])
        vv = v[rows]
        cv += K * np.array([np.sum(one**2 * vv), np.einsum("gjk,gk,gkj->", Si, vv, Si)])
    return blocks.scatter(a_parts, (2,)), blocks.scatter(t_parts, (2,)), A, cv


def _delta_norm(a, t, K, boundary):
    eq = a.sum(axis=0) - K * t.sum(axis=0)
    scale = 1.0 + np.abs(a).sum(axis=0) + K * np.abs(t).sum(axis=0)
    out = np.abs(eq) / scale
    if boundary:
        # at s2u = 0 the equation only has to point below the bound
        out[0] = max(eq[0], 0.0) / scale[0]
    return out


def fit_reblup_star(sample, config=None, init=None, fixed_s2e=None):
    """Fit the robust linkage-corrected model.

    Parameters
    ----------
    sample : LinkedSample
    config : RobustConfig, optional
    init : MixedFit, optional
        Starting values; a pseudo-REML fit is computed if omitted.
    fixed_s2e : float, optional
        Hold the unit-level variance fixed and solve only for ``s2u``.

    Returns
    -------
    RobustFit

    Raises
    ------
    ConvergenceError
        When the outer iteration limit is hit; the residual norms of the
        last iterate are attached.
    """
    config = config or RobustConfig()
    c, K = config.c, config.K
    X, y = sample.X_star, sample.y
    if sample.n <= sample.p:
        raise InputError("need more sampled units than covariates")
    blocks = AreaBlocks(sample.area, sample.n_areas)
    if init is None:
        try:
            init = fit_lmm_linked(sample)
        except ConvergenceError:
            init = None
    if init is not None:
        beta, (s2u, s2e) = init.beta.copy(), init.delta.copy()
    else:
        beta, s2u, s2e = _initial(sample, X, y)
    if fixed_s2e is not None:
        s2e = float(fixed_s2e)
    s2u = max(s2u, 1e-3 * s2e)
    Xg, yg = blocks.gather(X), blocks.gather(y)
    theta = np.concatenate([beta, [s2u, s2e]])
    norms = None
    for it in range(1, config.max_iter + 1):
        v = sample.linkage_variance(beta)
        S = blocks.covariances(s2u, s2e + v)
        Sinv = [np.linalg.inv(s) for s in S]
        sqrtU = blocks.gather(np.sqrt(s2u + s2e + v))
        beta = _beta_irls(blocks, Xg, yg, Sinv, sqrtU, c, beta, config.inner_tol)
        e = y - X @ beta
        a, t, A, cv = _delta_pieces(blocks, e, s2u, s2e, v, c, K)
        old_norm = _delta_norm(a, t, K, s2u <= 0).max()
        if fixed_s2e is None:
            target = np.linalg.solve(A, a.sum(axis=0) - cv)
            if target[0] <= 0.0:
                # s2u is pinned at zero: solve the s2e equation alone
                target = np.array([0.0, (a[:, 1].sum() - cv[1]) / A[1, 1]])
        else:
            target = np.array([(a[:, 0].sum() - cv[0] - A[0, 1] * s2e) / A[0, 0], s2e])
        target = np.array([max(target[0], 0.0), max(target[1], 1e-8)])
        cur = np.array([s2u, s2e])
        step = target - cur
        # halve the step while it increases the equation residual; if no
        # halving helps, the residual is a poor guide and the full step is kept
        full = step
        for _ in range(10):
            trial = cur + step
            a2, t2, _, _ = _delta_pieces(blocks, e, trial[0], trial[1], v, c, K)
            if _delta_norm(a2, t2, K, trial[0] <= 0).max() <= old_norm or old_norm < config.tol:
                break
            step = 0.5 * step
        else:
            step = full
        s2u, s2e = cur + step
        new = np.concatenate([beta, [s2u, s2e]])
        change = np.max(np.abs(new - theta) / (1.0 + np.abs(theta)))
        theta = new
        if change < config.tol:
            break
    else:
        raise ConvergenceError(
            f"robust fit did not converge in {config.max_iter} iterations",
            last_iterate=theta,
            norms={"change": float(change)},
        )
    # freeze v and re-solve beta so the fixed-effect equation holds exactly
    v = sample.linkage_variance(beta)
    Sinv = [np.linalg.inv(s) for s in blocks.covariances(s2u, s2e + v)]
    sqrtU = blocks.gather(np.sqrt(s2u + s2e + v))
    beta = _beta_irls(blocks, Xg, yg, Sinv, sqrtU, c, beta, config.inner_tol)
    e = y - X @ beta
    u, w2, w3 = _area_effects(blocks, e, s2e + v, s2u, c, config.inner_tol)
    fit = RobustFit(
        sample=sample,
        beta=beta,
        u=u,
        delta=np.array([s2u, s2e]),
        v=v,
        config=config,
        n_iter=it,
        w2=w2,
        w3=w3,
    )
    norms = estimating_equations(fit, fixed_s2e=fixed_s2e is not None)
    object.__setattr__(fit, "residual_norms", norms)
    return fit


def estimating_equations(fit, fixed_s2e=False):
    """Scaled sup-norms of the three equation blocks at ``fit``.

    Each component is ``|sum of terms| / (1 + sum |terms|)``.  When ``s2u``
    sits on the zero boundary its equation only counts a positive value.
    """
    s, c, K = fit.sample, fit.config.c, fit.config.K
    s2u, s2e = fit.delta
    blocks = fit.blocks
    X = s.X_star
    e = s.y - X @ fit.beta
    # fixed effects
    tb = np.zeros((s.n, s.p))
    for (ids, rows), Sg in zip(blocks.groups, blocks.covariances(s2u, s2e + fit.v)):
        Si = np.linalg.inv(Sg)
        U = s2u + s2e + fit.v[rows]
        phi = np.sqrt(U) * huber_psi(e[rows] / np.sqrt(U), c)
        # X' S^-1 phi per unit: spread S^-1 phi over units
        Sphi = np.einsum("gjk,gk->gj", Si, phi)
        tb[rows] = X[rows] * Sphi[..., None]
    beta_norm = np.max(np.abs(tb.sum(axis=0)) / (1.0 + np.abs(tb).sum(axis=0)))
    # area effects
    area = s.area
    if s2u > 0:
        sd = np.sqrt(s2e + fit.v)
        tu = huber_psi((e - fit.u[area]) / sd, c) / sd
        su = np.sqrt(s2u)
        pen = huber_psi(fit.u / su, c) / su
        num = np.bincount(area, weights=tu, minlength=s.n_areas) - pen
        den = 1.0 + np.bincount(area, weights=np.abs(tu), minlength=s.n_areas) + np.abs(pen)
        u_norm = float(np.max(np.abs(num) / den))
    else:
        u_norm = 0.0
    a, t, _, _ = _delta_pieces(blocks, e, s2u, s2e, fit.v, c, K)
    dn = _delta_norm(a, t, K, s2u <= 0)
    if fixed_s2e:
        dn[1] = 0.0
    return {"beta": float(beta_norm), "u": u_norm, "delta": float(dn.max())}


def predict_means_reblup_star(fit):
    return synthetic_means(fit.sample, fit.beta, fit.u)


# -- covariance estimators ------------------------------------------------


def _scaled_parts(fit):
    s, c = fit.sample, fit.config.c
    s2u, s2e = fit.delta
    U = s2u + s2e + fit.v
    s2 = s2e + fit.v
    e = s.y - s.X_star @ fit.beta
    r = e / np.sqrt(U)
    t = (e - fit.u[s.area]) / np.sqrt(s2)
    return U, s2, r, t


def sandwich_cov(fit, return_parts=False):
    """Sandwich covariance of ``(beta, u_1..u_D)``.

    The bread is the estimated expected Jacobian of the fixed-effect and
    area-effect equations (block lower triangular); the meat uses pooled
    ``psi`` moments over the sample times the corresponding design sums.
    """
    s, c = fit.sample, fit.config.c
    s2u = fit.delta[0]
    n, p, D = s.n, s.p, s.n_areas
    U, s2, r, t = _scaled_parts(fit)
    blocks = fit.blocks
    X = s.X_star
    A = np.zeros((p, p))
    Mbb_design = np.zeros((p, p))
    Mbu_design = np.zeros((p, D))
    Rd = huber_psi_prime(r, c)
    for (ids, rows), Sg in zip(blocks.groups, blocks.covariances(s2u, fit.delta[1] + fit.v)):
        Si = np.linalg.inv(Sg)
        Xr = X[rows]
        G = np.einsum("gjk,gka->gja", Si, Xr)  # S^-1 X
        A -= np.einsum("gja,gj,gjb->ab", G, Rd[rows], Xr)
        Ur = U[rows]
        Mbb_design += np.einsum("gja,gj,gjb->ab", G, Ur, G)
        Mbu_design[:, ids] = np.einsum("gja,gj->ag", G, np.sqrt(Ur / s2[rows]))
    Td = huber_psi_prime(t, c)
    area = s.area
    Cb = np.zeros((D, p))
    np.add.at(Cb, area, -(Td / s2)[:, None] * X)
    Buu = -np.bincount(area, weights=Td / s2, minlength=D)
    dof = max(n - p, 1)
    pr, pt = huber_psi(r, c), huber_psi(t, c)
    ka = np.sum(pr**2) / dof
    kb = np.sum(pt**2) / dof
    kc = np.sum(pr * pt) / dof
    meat = np.zeros((p + D, p + D))
    meat[:p, :p] = ka * Mbb_design
    meat[:p, p:] = kc * Mbu_design
    meat[p:, :p] = meat[:p, p:].T
    meat[p:, p:] = np.diag(kb * np.bincount(area, weights=1.0 / s2, minlength=D))
    if s2u > 0:
        su = np.sqrt(s2u)
        Cd = huber_psi_prime(fit.u / su, c)
        Buu = Buu - Cd / s2u
        try:
            Ainv = np.linalg.inv(A)
        except np.linalg.LinAlgError:
            warnings.warn("singular fixed-effect bread; using a pseudo-inverse", RuntimeWarning)
            Ainv = np.linalg.pinv(A)
        if np.any(Buu == 0):
            warnings.warn("singular area-effect bread; using a pseudo-inverse", RuntimeWarning)
        Binv = np.where(Buu != 0, 1.0 / np.where(Buu != 0, Buu, 1.0), 0.0)
        bread_inv = np.zeros((p + D, p + D))
        bread_inv[:p, :p] = Ainv
        bread_inv[p:, :p] = -(Binv[:, None] * Cb) @ Ainv
        bread_inv[p:, p:] = np.diag(Binv)
    else:
        # area effects pinned at zero: only the fixed-effect block varies
        bread_inv = np.zeros((p + D, p + D))
        bread_inv[:p, :p] = np.linalg.pinv(A)
        meat[p:, :] = 0.0
        meat[:, p:] = 0.0
    cov = bread_inv @ meat @ bread_inv.T
    cov = 0.5 * (cov + cov.T)
    if return_parts:
        bread = np.zeros((p + D, p + D))
        bread[:p, :p] = A
        bread[p:, :p] = Cb
        bread[p:, p:] = np.diag(Buu)
        return cov, {"bread": bread, "bread_inv": bread_inv, "meat": meat, "psi_moments": (ka, kb, kc)}
    return cov


def _delta_equation(fit, delta, e):
    a, t, _, _ = _delta_pieces(fit.blocks, e, delta[0], delta[1], fit.v, fit.config.c, fit.config.K)
    return a - fit.config.K * t  # per-area contributions (D, 2)


def v_delta_robust(fit, components=None):
    """Sandwich covariance of the robust variance components.

    Parameters
    ----------
    fit : RobustFit
    components : sequence of int, optional
        Indices of the estimated components (default: both, or only
        ``s2e`` when ``s2u`` is on the boundary).  Others are held fixed.

    Returns
    -------
    ndarray (2, 2)
        Zero rows/columns for components held fixed.
    """
    if components is None:
        components = [1] if fit.boundary else [0, 1]
    components = list(components)
    e = fit.sample.y - fit.sample.X_star @ fit.beta
    delta = fit.delta.astype(float)
    k = len(components)
    J = np.zeros((k, k))
    for col, l in enumerate(components):
        h = 1e-5 * (1.0 + abs(delta[l]))
        dp, dm = delta.copy(), delta.copy()
        dp[l] += h
        dm[l] = max(dm[l] - h, 0.0) if l == 0 else dm[l] - h
        fp = _delta_equation(fit, dp, e).sum(axis=0)[components]
        fm = _delta_equation(fit, dm, e).sum(axis=0)[components]
        J[:, col] = (fp - fm) / (dp[l] - dm[l])
    phi = _delta_equation(fit, delta, e)[:, components]
    meat = phi.T @ phi
    try:
        Jinv = np.linalg.inv(J)
    except np.linalg.LinAlgError:
        warnings.warn("singular variance-component bread; using a pseudo-inverse", RuntimeWarning)
        Jinv = np.linalg.pinv(J)
    cov_k = Jinv @ meat @ Jinv.T
    out = np.zeros((2, 2))
    out[np.ix_(components, components)] = 0.5 * (cov_k + cov_k.T)
    return out


def _shrinkage_rows(fit, delta):
    """Per-unit entries of ``B_i`` at variance components ``delta``.

    ``u_i = B_i (y*_i - X*_i beta)`` with Huber weights evaluated at the
    fitted ``beta`` and ``u`` but the supplied ``delta``.
    """
    s, c = fit.sample, fit.config.c
    s2u, s2e = delta
    s2 = s2e + fit.v
    e = s.y - s.X_star @ fit.beta
    if s2u <= 0:
        return np.zeros(s.n)
    t = (e - fit.u[s.area]) / np.sqrt(s2)
    w2 = huber_weights(t, c)
    w3 = huber_weights(fit.u / np.sqrt(s2u), c)
    num = w2 / s2
    den = np.bincount(s.area, weights=num, minlength=s.n_areas) + w3 / s2u
    return num / den[s.area]


def _h3(fit, Vd):
    s = fit.sample
    delta = fit.delta.astype(float)
    grads = []
    for l in range(2):
        if Vd[l, l] == 0.0:
            grads.append(None)
            continue
        h = 1e-5 * (1.0 + abs(delta[l]))
        dp, dm = delta.copy(), delta.copy()
        dp[l] += h
        dm[l] -= h
        grads.append((_shrinkage_rows(fit, dp) - _shrinkage_rows(fit, dm)) / (2 * h))
    s2 = fit.delta[1] + fit.v
    area = s.area
    h3 = np.zeros(s.n_areas)
    for k in range(2):
        for g in range(2):
            if grads[k] is None or grads[g] is None or Vd[k, g] == 0.0:
                continue
            # d_k B (u^2 J + diag s2) d_g B'
            sk = np.bincount(area, weights=grads[k], minlength=s.n_areas)
            sg = np.bincount(area, weights=grads[g], minlength=s.n_areas)
            diag = np.bincount(area, weights=grads[k] * grads[g] * s2, minlength=s.n_areas)
            h3 += Vd[k, g] * (fit.u**2 * sk * sg + diag)
    return h3


def _pseudo_linear_weights(fit):
    """Sample weights ``w_i`` with ``REBLUP_i = sum_j w_ij y*_j`` at fixed weights."""
    s, c = fit.sample, fit.config.c
    s2u, s2e = fit.delta
    X = s.X_star
    U = s2u + s2e + fit.v
    e = s.y - X @ fit.beta
    w1 = huber_weights(e / np.sqrt(U), c)
    blocks = fit.blocks
    SW = np.zeros((s.n, s.n))
    for (ids, rows), Sg in zip(blocks.groups, blocks.covariances(s2u, s2e + fit.v)):
        Si = np.linalg.inv(Sg)
        for k in range(len(ids)):
            rr = rows[k]
            SW[np.ix_(rr, rr)] = Si[k] * w1[rr][None, :]
    XtSW = X.T @ SW
    Amat = np.linalg.solve(XtSW @ X, XtSW)  # p x n
    B = _shrinkage_rows(fit, fit.delta)
    N = s.N_area.astype(float)
    n_i = s.n_area.astype(float)
    W = np.zeros((s.n_areas, s.n))
    for i in range(s.n_areas):
        rows = np.flatnonzero(s.area == i)
        Bi = B[rows]
        coef = s.xbar_r_star[i] - Bi @ X[rows]
        w = (N[i] - n_i[i]) * (coef @ Amat)
        w[rows] += 1.0 + (N[i] - n_i[i]) * Bi
        W[i] = w / N[i]
    return W


def mse_reblup_star(fit, eblup_fit=None, h2_pooling="sample", cov=None, v_delta=None):
    """Conditional MSE of the robust predictor: ``h1 + h2 + h3 + bias^2``.

    Parameters
    ----------
    fit : RobustFit
    eblup_fit : MixedFit, optional
        Non-robust fit supplying the conditional means used in the bias
        term; computed if omitted.
    h2_pooling : {"sample", "area"}
        Divisor of the pooled squared residuals: ``n - 1`` (default) or the
        area ``n_i - 1``.
    """
    s = fit.sample
    f = s.n_area / s.N_area
    p = s.p
    if cov is None:
        cov = sandwich_cov(fit)
    if v_delta is None:
        v_delta = v_delta_robust(fit)
    xr = s.xbar_r_star
    Vbb = cov[:p, :p]
    Vbu = cov[:p, p:]
    Vuu = np.diag(cov[p:, p:])
    h1 = (1 - f) ** 2 * (
        np.einsum("ia,ab,ib->i", xr, Vbb, xr) + 2 * np.einsum("ia,ai->i", xr, Vbu) + Vuu
    )
    res = s.y - s.X_star @ fit.beta - fit.u[s.area]
    Nr = (s.N_area - s.n_area).astype(float)
    if h2_pooling == "sample":
        denom = s.n - 1.0
    elif h2_pooling == "area":
        denom = np.maximum(s.n_area - 1.0, 1.0)
    else:
        raise InputError(f"unknown h2 pooling {h2_pooling!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        ve = np.where(Nr > 0, np.sum(res**2) / (Nr * denom), 0.0)
    h2 = (1 - f) ** 2 * ve
    h3 = (1 - f) ** 2 * _h3(fit, v_delta)
    if eblup_fit is None:
        eblup_fit = fit_lmm_linked(s)
    mu = s.X_star @ eblup_fit.beta + eblup_fit.u_star[s.area]
    W = _pseudo_linear_weights(fit)
    bias = W @ mu - (s.xbar_area @ eblup_fit.beta + eblup_fit.u_star)
    out = {}
    for name, val in (("h1", h1), ("h2", h2), ("h3", h3)):
        if np.any(val < -1e-10):
            warnings.warn(f"negative {name} clamped to zero", RuntimeWarning)
        out[name] = np.maximum(val, 0.0)
    out["bias2"] = bias**2
    out["mse"] = out["h1"] + out["h2"] + out["h3"] + out["bias2"]
    return pd.DataFrame(out)


class REBLUPStar(BaseEstimator):
    """Linkage-corrected robust EBLUP of small-area means.

    Parameters
    ----------
    c : float
        Huber tuning constant.
    correct_linkage : bool
        False gives the classical REBLUP (every block perfectly linked).
    max_iter, tol : int, float
    h2_pooling : {"sample", "area"}
    """

    def __init__(self, c=1.345, correct_linkage=True, max_iter=500, tol=1e-7, h2_pooling="sample"):
        self.c = c
        self.correct_linkage = correct_linkage
        self.max_iter = max_iter
        self.tol = tol
        self.h2_pooling = h2_pooling

    @property
    def name(self):
        return "*REBLUP" if self.correct_linkage else "REBLUP"

    def fit(self, X, y=None, init=None, **sample_kw):
        sample = _as_sample(X, y, **sample_kw)
        if not self.correct_linkage:
            sample = sample.perfect_linkage()
        self.sample_ = sample
        if init is None:
            try:
                init = fit_lmm_linked(sample)
            except ConvergenceError:
                init = None
        self.init_ = init
        cfg = RobustConfig(c=self.c, max_iter=self.max_iter, tol=self.tol)
        self.fit_ = fit_reblup_star(sample, cfg, init=init)
        self.coef_ = self.fit_.beta
        self.delta_ = self.fit_.delta
        return self

    def predict(self, X=None):
        check_is_fitted(self)
        return predict_means_reblup_star(self.fit_)

    def mse(self):
        check_is_fitted(self)
        return mse_reblup_star(self.fit_, eblup_fit=self.init_, h2_pooling=self.h2_pooling)

    def summary(self):
        check_is_fitted(self)
        fit = self.fit_
        names = self.sample_.feature_names or [f"x{k}" for k in range(self.sample_.p)]
        return {
            "estimator": self.name,
            "coefficients": dict(zip(map(str, names), map(float, fit.beta))),
            "variance_components": {"sigma2_u": float(fit.delta[0]), "sigma2_e": float(fit.delta[1])},
            "huber_c": float(self.c),
            "iterations": fit.n_iter,
            "residual_norms": fit.residual_norms,
        }
