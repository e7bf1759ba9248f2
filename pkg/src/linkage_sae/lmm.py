"""Linkage-corrected nested-error model: pseudo-REML fit, EBLUP predictors, MSE.

The working model for the linked responses of area ``i`` is

    E(y*_i) = X*_i beta,   Var(y*_i) = s2u J + diag(s2e + v_i(beta)),

with ``X*`` the corrected design and ``v`` the linkage variance of the
fitted values.  The covariance depends on ``beta`` through ``v``; the fit
alternates GLS for ``beta`` with Fisher scoring for the variance components
while ``v`` is frozen within each outer iteration.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from sklearn.base import BaseEstimator

from . import linkage
from ._areas import AreaBlocks
from ._validation import check_is_fitted
from .data import LinkedSample
from .exceptions import ConvergenceError, InputError

__all__ = [
    "MixedFit",
    "fit_lmm_linked",
    "predict_area_effects_star",
    "predict_area_effects_starstar",
    "predict_means_eblup",
    "mse_eblup_star",
    "mse_eblup_starstar",
    "mse_g4_lambda",
    "area_shrinkage",
    "lambda_gradient",
    "EBLUPStar",
]

S2E_FLOOR = 1e-8


@dataclass(frozen=True, eq=False)
class MixedFit:
    """Result of :func:`fit_lmm_linked`.

    Attributes
    ----------
    beta : ndarray (p,)
    delta : ndarray (2,)
        ``(s2u, s2e)``.
    v : ndarray (n,)
        Linkage variance of every sampled unit, frozen at the final iterate.
    info : ndarray (2, 2)
        Expected information of the (pseudo) likelihood for ``delta``.
    cov_delta : ndarray (2, 2)
        Inverse of ``info`` (pseudo-inverse if singular).
    u_star, u_starstar : ndarray (D,)
        Predicted area effects.
    certificates : dict
        ``gls_residual`` (scaled normal-equation residual), ``score``
        (sup-norm of the score at the solution, where a component held at
        its lower bound only counts a positive score), ``boundary``.
    """

    sample: LinkedSample
    beta: np.ndarray
    delta: np.ndarray
    v: np.ndarray
    info: np.ndarray
    cov_delta: np.ndarray
    u_star: np.ndarray
    u_starstar: np.ndarray
    n_iter: int
    method: str = "REML"
    certificates: dict = field(default_factory=dict)

    @property
    def boundary(self):
        return bool(self.certificates.get("boundary", False))

    @property
    def blocks(self):
        return AreaBlocks(self.sample.area, self.sample.n_areas)

    def sigma_blocks(self):
        """Per-area covariance matrices ``s2u J + diag(s2e + v)``."""
        blocks = self.blocks
        Ss = blocks.covariances(self.delta[0], self.delta[1] + self.v)
        out = [None] * self.sample.n_areas
        for (ids, _), S in zip(blocks.groups, Ss):
            for k, i in enumerate(ids):
                out[i] = S[k]
        return out

    def sigma_parts(self):
        """Per-area ``(s2u J, s2e I, diag(v))`` whose sum is the covariance."""
        out = [None] * self.sample.n_areas
        for ids, rows in self.blocks.groups:
            m = rows.shape[1]
            for k, i in enumerate(ids):
                out[i] = (
                    self.delta[0] * np.ones((m, m)),
                    self.delta[1] * np.eye(m),
                    np.diag(self.v[rows[k]]),
                )
        return out


class _State:
    """Per-area inverses and GLS pieces at fixed ``(delta, v)``."""

    def __init__(self, blocks, X, y, s2u, s2e, v):
        self.blocks = blocks
        self.s2u, self.s2e = s2u, s2e
        self.S = blocks.covariances(s2u, s2e + v)
        self.Sinv = [np.linalg.inv(S) for S in self.S]
        self.Xg = blocks.gather(X)
        self.yg = blocks.gather(y)
        self.XtSX = sum(np.einsum("gja,gjk,gkb->ab", Xg, Si, Xg) for Xg, Si in zip(self.Xg, self.Sinv))
        self.XtSy = sum(np.einsum("gja,gjk,gk->a", Xg, Si, yg) for Xg, Si, yg in zip(self.Xg, self.Sinv, self.yg))
        try:
            self.M = np.linalg.inv(self.XtSX)
        except np.linalg.LinAlgError as exc:
            raise InputError("corrected design is rank deficient") from exc
        self.beta = np.linalg.solve(self.XtSX, self.XtSy)


def _derivs(blocks, kind):
    """Covariance derivatives per group for ``delta = (s2u, s2e)``."""
    out = []
    for _, rows in blocks.groups:
        D, m = rows.shape
        out.append((np.ones((D, m, m)), np.broadcast_to(np.eye(m), (D, m, m))))
    return out


def _likelihood_terms(st, method):
    """Score vector and expected information for ``delta`` at ``st``."""
    K = 2
    score = np.zeros(K)
    scale = np.zeros(K)
    info = np.zeros((K, K))
    reml = method == "REML"
    derivs = _derivs(st.blocks, None)
    H = [np.zeros((st.M.shape[0],) * 2) for _ in range(K)]
    cross = np.zeros((K, K))
    for Xg, Si, yg, dd in zip(st.Xg, st.Sinv, st.yg, derivs):
        r = yg - Xg @ st.beta
        Py = np.einsum("gjk,gk->gj", Si, r)
        SA = [Si @ A for A in dd]
        G = Si @ Xg
        for l in range(K):
            quad = np.einsum("gj,gjk,gk->", Py, dd[l], Py)
            tr = np.trace(SA[l], axis1=1, axis2=2).sum()
            score[l] += 0.5 * quad - 0.5 * tr
            scale[l] += 0.5 * (abs(quad) + abs(tr))
            for k in range(l, K):
                info[l, k] += 0.5 * np.einsum("gjk,gkj->", SA[l], SA[k])
            if reml:
                H[l] += np.einsum("gja,gjk,gkb->ab", G, dd[l], G)
                for k in range(K):
                    # sum_i G_i' A_k S_i A_l G_i
                    cross[l, k] += np.trace(
                        st.M @ np.einsum("gja,gjk,gkb->ab", G, dd[k] @ SA[l], G)
                    )
    if reml:
        for l in range(K):
            score[l] += 0.5 * np.trace(st.M @ H[l])
            for k in range(l, K):
                info[l, k] += 0.5 * (-2.0 * cross[l, k] + np.trace(st.M @ H[l] @ st.M @ H[k]))
    info = np.triu(info) + np.triu(info, 1).T
    return score, info, scale


def _safe_inverse(info, what="information matrix"):
    w = np.linalg.eigvalsh(info)
    if w.min() <= 1e-12 * max(abs(w).max(), 1.0):
        warnings.warn(f"{what} is not positive definite; using a pseudo-inverse", RuntimeWarning)
        return np.linalg.pinv(info)
    out = np.linalg.inv(info)
    return 0.5 * (out + out.T)


def _initial(sample, X, y):
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    e = y - X @ beta
    D = sample.n_areas
    n_i = sample.n_area
    ebar = np.bincount(sample.area, weights=e, minlength=D) / n_i
    within = np.sum((e - ebar[sample.area]) ** 2)
    dof = sample.n - D
    s2e = within / dof if dof > 0 else np.var(e)
    s2e = max(s2e, 1e-6 * max(np.var(y), 1e-12))
    between = np.var(ebar, ddof=1) if D > 1 else 0.0
    s2u = max(between - s2e * np.mean(1.0 / n_i), 0.05 * s2e)
    return beta, s2u, s2e


def fit_lmm_linked(sample, method="REML", max_iter=100, tol=1e-6, fixed_s2u=None):
    """Fit the linkage-corrected random-intercept model.

    Parameters
    ----------
    sample : LinkedSample
    method : {"REML", "ML"}
        Pseudo-REML (default) or pseudo-ML variance components.
    max_iter, tol : int, float
        Outer iterations stop when the sup-norm change of ``(beta, delta)``,
        relative to ``1 + |value|``, drops below ``tol``.
    fixed_s2u : float, optional
        Hold ``s2u`` at this value and estimate only ``s2e``.

    Returns
    -------
    MixedFit

    Raises
    ------
    ConvergenceError
        If the iteration limit is reached.
    """
    if method not in ("REML", "ML"):
        raise InputError(f"unknown variance-component method {method!r}")
    n, p = sample.n, sample.p
    if n <= p:
        raise InputError(f"need more sampled units ({n}) than covariates ({p})")
    X, y = sample.X_star, sample.y
    blocks = AreaBlocks(sample.area, sample.n_areas)
    beta, s2u, s2e = _initial(sample, X, y)
    if fixed_s2u is not None:
        s2u = float(fixed_s2u)
    theta = np.concatenate([beta, [s2u, s2e]])
    v = sample.linkage_variance(beta)
    damp = {"factor": 1.0, "sign": 0.0}

    def step(s2u, s2e, v):
        st = _State(blocks, X, y, s2u, s2e, v)
        v = sample.linkage_variance(st.beta)
        st = _State(blocks, X, y, s2u, s2e, v)
        score, info, _ = _likelihood_terms(st, method)
        # Newton step with bounds: when one component's move is cut short
        # (s2u at zero, s2e shrunk at most tenfold) the other is scored
        # conditionally on that move
        free_u = fixed_s2u is None
        if free_u:
            d = np.linalg.lstsq(info, score, rcond=None)[0]
        else:
            d = np.array([0.0, score[1] / info[1, 1]])
        e_min = max(0.1 * s2e, S2E_FLOOR)
        for _ in range(2):
            if free_u and s2u + d[0] <= 0.0:
                d[0] = -s2u
                d[1] = (score[1] - info[1, 0] * d[0]) / info[1, 1]
            if s2e + d[1] < e_min:
                d[1] = e_min - s2e
                if free_u and s2u + d[0] > 0.0:
                    d[0] = (score[0] - info[0, 1] * d[1]) / info[0, 0]
                    continue
            break
        # the frozen v couples beta and s2e and can make the steps oscillate:
        # halve them while the s2e step keeps reversing
        sign = np.sign(d[1])
        damp["factor"] = 0.5 * damp["factor"] if sign * damp["sign"] < 0 else min(1.0, 2.0 * damp["factor"])
        damp["sign"] = sign
        d *= damp["factor"]
        s2u = max(s2u + d[0], 0.0)
        s2e = max(s2e + d[1], S2E_FLOOR)
        return st.beta, s2u, s2e, v

    converged = False
    for it in range(1, max_iter + 1):
        beta, s2u, s2e, v = step(s2u, s2e, v)
        new = np.concatenate([beta, [s2u, s2e]])
        change = np.max(np.abs(new - theta) / (1.0 + np.abs(theta)))
        theta = new
        if change < tol:
            converged = True
            break
    if not converged:
        raise ConvergenceError(
            f"pseudo-{method} did not converge in {max_iter} iterations",
            last_iterate=theta,
            norms={"change": float(change)},
        )
    # a few extra scoring steps tighten the score certificate
    for _ in range(5):
        beta, s2u, s2e, v = step(s2u, s2e, v)
        new = np.concatenate([beta, [s2u, s2e]])
        small = np.max(np.abs(new - theta) / (1.0 + np.abs(theta))) < 1e-3 * tol
        theta = new
        if small:
            break
    st = _State(blocks, X, y, s2u, s2e, v)
    beta = st.beta
    score, info, scale = _likelihood_terms(st, method)
    delta = np.array([s2u, s2e])
    boundary = s2u <= 0.0
    if fixed_s2u is not None:
        cov_delta = np.zeros((2, 2))
        cov_delta[1, 1] = 1.0 / info[1, 1]
    elif boundary:
        # s2u sits on the constraint; its sampling variance is not identified
        cov_delta = np.zeros((2, 2))
        cov_delta[1, 1] = 1.0 / info[1, 1]
    else:
        cov_delta = _safe_inverse(info)
    # a component held at its lower bound only needs a non-positive score
    held = np.array([boundary, s2e <= S2E_FLOOR])
    kkt = np.where(held, np.maximum(score, 0.0), np.abs(score))
    if fixed_s2u is not None:
        kkt[0] = 0.0
    resid = st.XtSy - st.XtSX @ beta
    certificates = {
        "gls_residual": float(np.max(np.abs(resid)) / (1.0 + np.max(np.abs(beta)))),
        "score": float(np.max(kkt)),
        "score_scaled": float(np.max(kkt / (1.0 + scale))),
        "boundary": bool(boundary),
        "change": float(change),
    }
    u_star, u_ss = _area_effects(blocks, sample, beta, s2u, st.Sinv)
    return MixedFit(
        sample=sample,
        beta=beta,
        delta=delta,
        v=v,
        info=info,
        cov_delta=cov_delta,
        u_star=u_star,
        u_starstar=u_ss,
        n_iter=it,
        method=method,
        certificates=certificates,
    )


def _area_effects(blocks, sample, beta, s2u, Sinv):
    r_star = sample.y - sample.X_star @ beta
    r_naive = sample.lam_unit * (sample.y - sample.X @ beta)
    us, uss = [], []
    for Si, rs, rn in zip(Sinv, blocks.gather(r_star), blocks.gather(r_naive)):
        b = s2u * Si.sum(axis=1)  # rows of s2u 1' S^-1 (S symmetric)
        us.append(np.einsum("gj,gj->g", b, rs))
        uss.append(np.einsum("gj,gj->g", b, rn))
    return blocks.scatter(us), blocks.scatter(uss)


def _inverses(fit):
    blocks = fit.blocks
    S = blocks.covariances(fit.delta[0], fit.delta[1] + fit.v)
    return blocks, S, [np.linalg.inv(s) for s in S]


def predict_area_effects_star(fit, sample=None):
    """``u*_i = s2u 1' S_i^-1 (y*_i - X*_i beta)`` for every area."""
    if sample is None or sample is fit.sample:
        return fit.u_star.copy()
    blocks = AreaBlocks(sample.area, sample.n_areas)
    v = sample.linkage_variance(fit.beta)
    Sinv = [np.linalg.inv(S) for S in blocks.covariances(fit.delta[0], fit.delta[1] + v)]
    return _area_effects(blocks, sample, fit.beta, fit.delta[0], Sinv)[0]


def predict_area_effects_starstar(fit, sample=None):
    """``u**_i = s2u 1' S_i^-1 Lambda_i (y*_i - X_i beta)`` (uncorrected design)."""
    if sample is None or sample is fit.sample:
        return fit.u_starstar.copy()
    blocks = AreaBlocks(sample.area, sample.n_areas)
    v = sample.linkage_variance(fit.beta)
    Sinv = [np.linalg.inv(S) for S in blocks.covariances(fit.delta[0], fit.delta[1] + v)]
    return _area_effects(blocks, sample, fit.beta, fit.delta[0], Sinv)[1]


def synthetic_means(sample, beta, u):
    """``N_i^-1 {n_i ybar*_si + (N_i - n_i)(xbar*_ri' beta + u_i)}``."""
    N = sample.N_area.astype(float)
    n = sample.n_area.astype(float)
    return (n * sample.ybar_s + (N - n) * (sample.xbar_r_star @ beta + u)) / N


def predict_means_eblup(fit, variant="star"):
    """Area-mean predictions of the corrected EBLUP.

    ``variant="star"`` uses ``u*``; ``"starstar"`` uses ``u**``.
    """
    if variant == "star":
        u = fit.u_star
    elif variant == "starstar":
        u = fit.u_starstar
    else:
        raise InputError(f"unknown EBLUP variant {variant!r}")
    return synthetic_means(fit.sample, fit.beta, u)


def area_shrinkage(sample, beta, delta, lambdas=None):
    """Per-area vectors ``b_i = s2u S_i^-1 1`` at given parameters.

    With ``lambdas`` the linkage variance is rebuilt at those block
    probabilities (``beta`` held fixed).  Returns a list indexed by area of
    ``(rows, b_i)`` pairs.
    """
    s = sample if lambdas is None else sample.with_lambdas(lambdas)
    v = s.linkage_variance(beta)
    blocks = AreaBlocks(s.area, s.n_areas)
    out = [None] * s.n_areas
    for (ids, rows), S in zip(blocks.groups, blocks.covariances(delta[0], delta[1] + v)):
        b = delta[0] * np.linalg.solve(S, np.ones(S.shape[:2])[..., None])[..., 0]
        for k, i in enumerate(ids):
            out[i] = (rows[k], b[k])
    return out


def _dv_dlambda(sample, beta):
    """Derivative of each unit's linkage variance w.r.t. its block lambda."""
    f = sample.X @ beta
    fbar, fbar2 = linkage.group_moments(f, sample.moment_groups)
    lam = sample.lam_unit
    dv = (1.0 - 2.0 * lam) * (f - fbar) ** 2 - np.maximum(fbar2 - fbar**2, 0.0)
    return np.where(sample.N_unit < 2, 0.0, dv)


def lambda_gradient(fit, variant="star"):
    """Analytic ``d b_i / d lambda_q`` for every area and block.

    Returns an ``(n, Q)`` array: column ``q`` holds, at the rows of each
    area, the derivative of that area's shrinkage vector.  For the
    ``"starstar"`` variant the derivative of ``Lambda_i b_i`` is returned.
    """
    s = fit.sample
    blocks, _, Sinv = _inverses(fit)
    dv = _dv_dlambda(s, fit.beta)
    Q = s.n_blocks
    out = np.zeros((s.n, Q))
    for (ids, rows), Si in zip(blocks.groups, Sinv):
        b = fit.delta[0] * Si.sum(axis=2)
        blk = s.block[rows]
        dvg = dv[rows]
        lam = s.lam_unit[rows]
        for q in range(Q):
            mask = (blk == q).astype(float)
            # d b = - S^-1 diag(dv * 1_q) S^-1 (s2u 1) = - S^-1 diag(.) b
            db = -np.einsum("gjk,gk->gj", Si, mask * dvg * b)
            if variant == "starstar":
                eff = np.where(s.N_unit[rows] < 2, 0.0, mask)
                db = lam * db + eff * b
            out[rows, q] = db
    return out


def _components(fit, variant, cov_delta=None):
    s = fit.sample
    s2u, s2e = fit.delta
    blocks, S, Sinv = _inverses(fit)
    V = fit.cov_delta if cov_delta is None else cov_delta
    M = np.linalg.inv(
        sum(
            np.einsum("gja,gjk,gkb->ab", Xg, Si, Xg)
            for Xg, Si in zip(blocks.gather(s.X_star), Sinv)
        )
    )
    g1s, g2s, g3s = [], [], []
    for (ids, rows), Sg, Si in zip(blocks.groups, S, Sinv):
        Xs = s.X_star[rows]
        one = np.ones(rows.shape)
        S1 = Si.sum(axis=2)
        b = s2u * S1
        lam = s.lam_unit[rows] if variant == "starstar" else one
        # d b / d s2u = S^-1 1 - s2u S^-1 J S^-1 1 ;  d b / d s2e = - s2u S^-2 1
        db_u = S1 - s2u * S1 * S1.sum(axis=1, keepdims=True)
        db_e = -s2u * np.einsum("gjk,gk->gj", Si, S1)
        grads = [lam * db_u, lam * db_e]
        bl = lam * b
        if variant == "star":
            g1 = s2u - s2u * np.einsum("gj->g", b)
        else:
            Sb = np.einsum("gjk,gk->gj", Sg, bl)
            g1 = s2u + np.einsum("gj,gj->g", bl, Sb) - 2.0 * s2u * bl.sum(axis=1)
        C = s.xbar_area[ids] - np.einsum("gj,gja->ga", bl, Xs)
        g2 = np.einsum("ga,ab,gb->g", C, M, C)
        g3 = np.zeros(len(ids))
        for l in range(2):
            for k in range(2):
                if V[l, k] != 0.0:
                    g3 += V[l, k] * np.einsum("gj,gjk,gk->g", grads[l], Sg, grads[k])
        g1s.append(g1)
        g2s.append(g2)
        g3s.append(g3)
    g1 = blocks.scatter(g1s)
    g2 = blocks.scatter(g2s)
    g3 = blocks.scatter(g3s)
    return g1, g2, g3


def mse_g4_lambda(fit, lambda_var=None, variant="star"):
    """Extra MSE term for estimated block lambdas.

    ``g4_i = sum_q V(lambda_q) (d b_i/d lambda_q)' S_i (d b_i/d lambda_q)``.
    Returns zeros (with a warning) when no lambda variances are available.
    """
    s = fit.sample
    lv = s.lambda_var if lambda_var is None else np.asarray(lambda_var, dtype=float)
    if lv is None:
        warnings.warn("no lambda variances available; g4 omitted", RuntimeWarning)
        return np.zeros(s.n_areas)
    if lv.shape != (s.n_blocks,) or np.any(lv < 0):
        raise InputError("lambda variances need one non-negative entry per block")
    grad = lambda_gradient(fit, variant)
    blocks, S, _ = _inverses(fit)
    parts = []
    for (ids, rows), Sg in zip(blocks.groups, S):
        g = np.zeros(len(ids))
        for q in range(s.n_blocks):
            if lv[q] == 0.0:
                continue
            d = grad[rows, q]
            g += lv[q] * np.einsum("gj,gjk,gk->g", d, Sg, d)
        parts.append(g)
    return blocks.scatter(parts)


def _total(fit, g1, g2, g3, g4=None):
    s = fit.sample
    f = s.n_area / s.N_area
    inner = g1 + g2 + 2.0 * g3 + (0.0 if g4 is None else g4)
    return (1.0 - f) ** 2 * inner


def _clamp(name, x):
    if np.any(x < -1e-10):
        warnings.warn(f"negative {name} clamped to zero", RuntimeWarning)
    return np.maximum(x, 0.0)


def mse_eblup_star(fit, lambda_uncertainty=False, lambda_var=None):
    """Prasad-Rao type MSE of the corrected EBLUP.

    Returns a DataFrame with columns ``g1, g2, g3`` (and ``g4`` when
    ``lambda_uncertainty``) plus ``mse = (1 - n_i/N_i)^2 (g1 + g2 + 2 g3 [+ g4])``.
    """
    g1, g2, g3 = _components(fit, "star")
    cols = {"g1": _clamp("g1", g1), "g2": _clamp("g2", g2), "g3": _clamp("g3", g3)}
    g4 = None
    if lambda_uncertainty:
        g4 = _clamp("g4", mse_g4_lambda(fit, lambda_var, "star"))
        cols["g4"] = g4
    cols["mse"] = _total(fit, cols["g1"], cols["g2"], cols["g3"], g4)
    return pd.DataFrame(cols)


def mse_eblup_starstar(fit, lambda_uncertainty=False, lambda_var=None):
    """MSE of the EBLUP built on ``u**`` (the lambda-weighted area effects)."""
    g1, g2, g3 = _components(fit, "starstar")
    cols = {"g1": _clamp("g1", g1), "g2": _clamp("g2", g2), "g3": _clamp("g3", g3)}
    g4 = None
    if lambda_uncertainty:
        g4 = _clamp("g4", mse_g4_lambda(fit, lambda_var, "starstar"))
        cols["g4"] = g4
    cols["mse"] = _total(fit, cols["g1"], cols["g2"], cols["g3"], g4)
    return pd.DataFrame(cols)


def _as_sample(X, y=None, **kw):
    if isinstance(X, LinkedSample):
        return X
    if y is None:
        raise InputError("pass a LinkedSample or arrays X, y with cell metadata")
    return LinkedSample(X=X, y=y, **kw)


class EBLUPStar(BaseEstimator):
    """Linkage-corrected EBLUP of small-area means.

    Parameters
    ----------
    variant : {"star", "starstar"}
        Area effects from the corrected residuals (``"star"``) or from the
        lambda-weighted naive residuals (``"starstar"``).
    correct_linkage : bool
        If False every block is treated as perfectly linked, which gives the
        classical EBLUP.
    method : {"REML", "ML"}
    max_iter, tol : int, float
    lambda_uncertainty : bool
        Add the ``g4`` term using the sample's ``lambda_var``.

    Examples
    --------
    >>> est = EBLUPStar().fit(sample)            # doctest: +SKIP
    >>> est.predict(), est.mse()["mse"]          # doctest: +SKIP
    """

    def __init__(
        self,
        variant="star",
        correct_linkage=True,
        method="REML",
        max_iter=100,
        tol=1e-6,
        lambda_uncertainty=False,
    ):
        self.variant = variant
        self.correct_linkage = correct_linkage
        self.method = method
        self.max_iter = max_iter
        self.tol = tol
        self.lambda_uncertainty = lambda_uncertainty

    @property
    def name(self):
        if not self.correct_linkage:
            return "EBLUP"
        return "*EBLUP" if self.variant == "star" else "**EBLUP"

    def fit(self, X, y=None, **sample_kw):
        if self.variant not in ("star", "starstar"):
            raise InputError(f"unknown EBLUP variant {self.variant!r}")
        sample = _as_sample(X, y, **sample_kw)
        if not self.correct_linkage:
            sample = sample.perfect_linkage()
        self.sample_ = sample
        self.fit_ = fit_lmm_linked(sample, self.method, self.max_iter, self.tol)
        self.coef_ = self.fit_.beta
        self.delta_ = self.fit_.delta
        return self

    def predict(self, X=None):
        """Predicted means of the sampled areas (order of ``area_labels``)."""
        check_is_fitted(self)
        return predict_means_eblup(self.fit_, self.variant)

    def mse(self):
        check_is_fitted(self)
        f = mse_eblup_star if self.variant == "star" else mse_eblup_starstar
        lu = self.lambda_uncertainty and self.correct_linkage
        return f(self.fit_, lambda_uncertainty=lu)

    def summary(self):
        check_is_fitted(self)
        fit = self.fit_
        names = self.sample_.feature_names or [f"x{k}" for k in range(self.sample_.p)]
        return {
            "estimator": self.name,
            "coefficients": dict(zip(map(str, names), map(float, fit.beta))),
            "variance_components": {"sigma2_u": float(fit.delta[0]), "sigma2_e": float(fit.delta[1])},
            "iterations": fit.n_iter,
            "certificates": fit.certificates,
        }
