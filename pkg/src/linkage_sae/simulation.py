"""Monte Carlo engine: synthetic registers, linkage, sampling, estimation, metrics."""
from __future__ import annotations

import logging
import math
import sys
import warnings
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
import pandas as pd

from . import linkage
from .data import LinkedSample, PopulationFrame
from .exceptions import ConvergenceError, InputError, LinkageSAEError
from .lmm import EBLUPStar
from .mquantile import MQStar
from .robust import REBLUPStar, sandwich_cov

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

__all__ = [
    "ESTIMATORS",
    "ScenarioConfig",
    "ReplicateResult",
    "SimulationReport",
    "generate_population",
    "apply_linkage",
    "draw_sample",
    "sample_from_rows",
    "run_replicate",
    "run_monte_carlo",
    "run_design_based",
    "metrics",
]

log = logging.getLogger(__name__)

ESTIMATORS = ("EBLUP", "*EBLUP", "**EBLUP", "REBLUP", "*REBLUP", "MQ", "*MQ")
STAGES = {"population": 0, "linkage": 1, "sample": 2, "audit": 3}
MAX_FAILURE_RATE = 0.02


@dataclass(frozen=True)
class ScenarioConfig:
    """Settings of a model-based Monte Carlo study.

    Variances (``u_var``, ``e_var`` and the outlier variants) are variances,
    not standard deviations.  ``outlier_areas`` counts the last areas whose
    random effects use ``u_var_outlier`` in the ``"eu"`` scenario.
    """

    scenario: str = "00"
    D: int = 40
    N_i: int = 100
    n_i: int = 5
    lambdas: tuple = (1.0, 0.9, 0.6, 0.4)
    units_per_block: int = 25
    replicates: int = 200
    base_seed: int = 20240101
    huber_c: float = 1.345
    estimators: tuple = ESTIMATORS
    mse: bool = True
    beta: tuple = (100.0, 5.0)
    x_logmean: float = 1.0
    x_logsd: float = 0.5
    u_var: float = 3.0
    e_var: float = 6.0
    u_var_outlier: float = 20.0
    e_var_outlier: float = 150.0
    e_outlier_prob: float = 0.03
    outlier_areas: int = 4
    audit_size: int = 0
    lambda_variance: str = "binomial"
    tau_grid: tuple = None
    moments: str = "block"
    h2_pooling: str = "sample"
    n_jobs: int = 1

    def __post_init__(self):
        if self.scenario not in ("00", "eu"):
            raise InputError(f"scenario must be '00' or 'eu', got {self.scenario!r}")
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.tau_grid is not None:
            object.__setattr__(self, "tau_grid", tuple(float(t) for t in self.tau_grid))
        unknown = set(self.estimators) - set(ESTIMATORS)
        if unknown:
            raise InputError(f"unknown estimators {sorted(unknown)}")
        if self.D < 1 or self.N_i < 1:
            raise InputError("D and N_i must be positive")
        if self.units_per_block * len(self.lambdas) != self.N_i:
            raise InputError(
                f"{len(self.lambdas)} blocks of {self.units_per_block} units do not fill N_i={self.N_i}"
            )
        if not 1 <= self.n_i <= self.N_i:
            raise InputError("n_i must lie in [1, N_i]")
        if self.replicates < 1:
            raise InputError("replicates must be positive")
        linkage.BlockSpec("check", min(self.lambdas))
        linkage.BlockSpec("check", max(self.lambdas))
        if self.lambda_variance not in ("binomial", "sample-total"):
            raise InputError("lambda_variance must be 'binomial' or 'sample-total'")

    @classmethod
    def from_toml(cls, path):
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
        return cls.from_dict(raw.get("scenario_config", raw))

    @classmethod
    def from_dict(cls, raw):
        names = {f.name for f in fields(cls)}
        unknown = set(raw) - names
        if unknown:
            raise InputError(f"unknown scenario keys: {sorted(unknown)}")
        kw = dict(raw)
        for key in ("lambdas", "estimators", "beta", "tau_grid"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(kw[key])
        return cls(**kw)

    def to_dict(self):
        return asdict(self)

    def rng(self, replicate, stage):
        return np.random.default_rng([self.base_seed, replicate, STAGES[stage]])


# -- data generation ------------------------------------------------------


def generate_population(config, rng):
    """Synthetic register ``y = b0 + b1 x + u_i + e`` with random block labels."""
    D, Ni = config.D, config.N_i
    Q = len(config.lambdas)
    area = np.repeat(np.arange(D), Ni)
    block = np.concatenate(
        [rng.permutation(np.repeat(np.arange(Q), config.units_per_block)) for _ in range(D)]
    )
    x = np.exp(rng.normal(config.x_logmean, config.x_logsd, D * Ni))
    u_sd = np.full(D, math.sqrt(config.u_var))
    if config.scenario == "eu" and config.outlier_areas > 0:
        u_sd[D - config.outlier_areas :] = math.sqrt(config.u_var_outlier)
    u = rng.normal(0.0, 1.0, D) * u_sd
    e = rng.normal(0.0, math.sqrt(config.e_var), D * Ni)
    if config.scenario == "eu":
        contaminated = rng.random(D * Ni) < config.e_outlier_prob
        e_out = rng.normal(0.0, math.sqrt(config.e_var_outlier), D * Ni)
        e = np.where(contaminated, e_out, e)
    b0, b1 = config.beta
    y = b0 + b1 * x + u[area] + e
    return PopulationFrame(X=x[:, None], y=y, area=area, block=block, extras={"u": u})


def apply_linkage(pop, lambdas, rng):
    """Permute ``y`` within every (area, block) cell; sets ``y_star`` and ``mislinked``."""
    lambdas = np.asarray(lambdas, dtype=float)
    cell, c_area, c_block = pop.cell_codes()
    order = np.argsort(cell, kind="stable")
    counts = np.bincount(cell)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    src = np.arange(pop.size)
    for c in range(len(counts)):
        rows = order[starts[c] : starts[c] + counts[c]]
        draw = linkage.sample_ele_permutation(
            len(rows), lambdas[c_block[c]], rng, c_block[c], c_area[c]
        )
        src[rows] = rows[draw.perm]
    y_star = pop.y[src]
    out = replace(pop, y_star=y_star, mislinked=src != np.arange(pop.size))
    out.extras = dict(pop.extras, source=src)
    return out


def sample_from_rows(pop, rows, lambdas, lambda_var=None, moments="block"):
    """LinkedSample for population ``rows`` of a linked population."""
    if pop.y_star is None:
        raise InputError("population has no linked response")
    c_area, c_block, N, xbar = pop.cell_aggregates()
    rows = np.sort(np.asarray(rows))
    return LinkedSample(
        X=np.column_stack([np.ones(len(rows)), pop.X[rows]]),
        y=pop.y_star[rows],
        area=pop.area[rows],
        block=pop.block[rows],
        lambdas=np.asarray(lambdas, dtype=float),
        cell_area=c_area,
        cell_block=c_block,
        cell_N=N,
        cell_xbar=xbar,
        area_labels=pop.area_labels,
        block_labels=pop.block_labels,
        lambda_var=lambda_var,
        feature_names=("intercept",) + tuple(pop.feature_names),
        moments=moments,
    )


def draw_sample(pop, n_i, rng, lambdas, lambda_var=None, moments="block"):
    """Simple random sample without replacement of ``n_i[i]`` units per area."""
    n_i = np.broadcast_to(np.asarray(n_i), (pop.n_areas,))
    order = np.argsort(pop.area, kind="stable")
    counts = np.bincount(pop.area, minlength=pop.n_areas)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    rows = []
    for i in range(pop.n_areas):
        if n_i[i] > counts[i]:
            raise InputError(f"area {pop.area_labels[i]!r}: sample size exceeds population")
        units = order[starts[i] : starts[i] + counts[i]]
        rows.append(rng.choice(units, size=int(n_i[i]), replace=False))
    rows = np.concatenate(rows)
    return sample_from_rows(pop, rows, lambdas, lambda_var, moments), np.sort(rows)


def audit_lambdas(pop, m, rng, variance="binomial", n_linked=None):
    """Audit ``m`` random linked records per block of a linked population."""
    Q = len(pop.block_labels)
    correct = np.zeros(Q, dtype=int)
    sizes = np.zeros(Q, dtype=int)
    for q in range(Q):
        units = np.flatnonzero(pop.block == q)
        k = min(m, len(units))
        pick = rng.choice(units, size=k, replace=False)
        correct[q] = int(np.sum(~pop.mislinked[pick]))
        sizes[q] = k
    audit = linkage.AuditSample(tuple(pop.block_labels), sizes, correct)
    return linkage.estimate_lambda_audit(audit, variance, n_linked)


# -- estimation -----------------------------------------------------------


@dataclass
class ReplicateResult:
    """Per-area truths, predictions and MSE estimates of one replicate."""

    replicate: int
    truth: np.ndarray
    points: dict
    mse: dict
    diagnostics: dict = field(default_factory=dict)


def _make(name, config):
    c = config.huber_c
    if name == "EBLUP":
        return EBLUPStar(correct_linkage=False)
    if name == "*EBLUP":
        return EBLUPStar("star", lambda_uncertainty=config.audit_size > 0)
    if name == "**EBLUP":
        return EBLUPStar("starstar", lambda_uncertainty=config.audit_size > 0)
    if name == "REBLUP":
        return REBLUPStar(c=c, correct_linkage=False, h2_pooling=config.h2_pooling)
    if name == "*REBLUP":
        return REBLUPStar(c=c, h2_pooling=config.h2_pooling)
    if name == "MQ":
        return MQStar(c=c, taus=config.tau_grid, correct_linkage=False)
    if name == "*MQ":
        return MQStar(c=c, taus=config.tau_grid)
    raise InputError(name)


def _sym_eig(M):
    M = np.asarray(M, dtype=float)
    asym = float(np.max(np.abs(M - M.T))) if M.size else 0.0
    S = 0.5 * (M + M.T)
    mineig = float(np.linalg.eigvalsh(S).min()) if S.size else 0.0
    return asym, mineig


def estimate_all(sample, config, truth=None, replicate=0):
    """Fit every configured estimator on one sample."""
    points, mses, diag = {}, {}, {}
    eblup_fits = {}
    for name in config.estimators:
        est = _make(name, config)
        if isinstance(est, REBLUPStar):
            key = est.correct_linkage
            if key not in eblup_fits:
                s = sample if key else sample.perfect_linkage()
                eblup_fits[key] = EBLUPStar(correct_linkage=True).fit(s).fit_
            est.fit(sample, init=eblup_fits[key])
        else:
            est.fit(sample)
        if isinstance(est, EBLUPStar):
            eblup_fits.setdefault(est.correct_linkage, est.fit_)
        points[name] = est.predict()
        d = {}
        if isinstance(est, EBLUPStar):
            cert = est.fit_.certificates
            d["equation_norm"] = max(cert["gls_residual"], cert["score_scaled"])
            d["boundary"] = cert["boundary"]
            d["matrix_asym"], d["matrix_mineig"] = _sym_eig(est.fit_.info)
        elif isinstance(est, REBLUPStar):
            d["equation_norm"] = max(est.fit_.residual_norms.values())
            d["boundary"] = est.fit_.boundary
            cov = sandwich_cov(est.fit_)
            d["matrix_asym"], d["matrix_mineig"] = _sym_eig(cov)
        else:
            d["equation_norm"] = float(est.fit_.equation_norms.max())
            d["boundary"] = False
        diag[name] = d
        if config.mse:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                mses[name] = est.mse()["mse"].to_numpy()
    return ReplicateResult(replicate, truth, points, mses, diag)


def run_replicate(config, r):
    """One replicate: population, linkage, sample and every estimator."""
    pop = generate_population(config, config.rng(r, "population"))
    pop = apply_linkage(pop, config.lambdas, config.rng(r, "linkage"))
    lambdas, lvar = np.asarray(config.lambdas), None
    if config.audit_size > 0:
        n_linked = np.full(len(lambdas), config.D * config.n_i / len(lambdas))
        lambdas, lvar = audit_lambdas(
            pop, config.audit_size, config.rng(r, "audit"), config.lambda_variance, n_linked
        )
    sample, _ = draw_sample(pop, config.n_i, config.rng(r, "sample"), lambdas, lvar, config.moments)
    res = estimate_all(sample, config, pop.true_means(), r)
    res.diagnostics["_mislink_rate"] = float(np.mean(pop.mislinked))
    return res


# -- metrics --------------------------------------------------------------


@dataclass
class SimulationReport:
    """Aggregated Monte Carlo results.

    ``table1`` has columns ``estimator, median_relbias_pct,
    median_rrmse_pct, eff``; ``table2`` the root-MSE estimator diagnostics
    ``estimator, median_relbias_pct, median_rrmse_pct``.
    """

    table1: pd.DataFrame
    table2: pd.DataFrame
    results: list = field(default_factory=list, repr=False)
    failures: list = field(default_factory=list)
    diagnostics: pd.DataFrame = None

    @property
    def n_replicates(self):
        return len(self.results)

    def write(self, outdir, replicates=False):
        import os

        os.makedirs(outdir, exist_ok=True)
        self.table1.to_csv(os.path.join(outdir, "table1.csv"), index=False, float_format="%.6f")
        self.table2.to_csv(os.path.join(outdir, "table2.csv"), index=False, float_format="%.6f")
        if replicates:
            replicate_frame(self.results).to_csv(
                os.path.join(outdir, "replicates.csv"), index=False, float_format="%.10g"
            )


def replicate_frame(results):
    rows = []
    for res in results:
        for name, pts in res.points.items():
            mse = res.mse.get(name, np.full(len(pts), np.nan))
            for i in range(len(pts)):
                rows.append((res.replicate, i, name, res.truth[i], pts[i], mse[i]))
    return pd.DataFrame(rows, columns=["replicate", "area", "estimator", "truth", "point", "mse"])


def metrics(results, baseline="EBLUP"):
    """Median relative bias, RRMSE and efficiency across areas.

    Parameters
    ----------
    results : list of ReplicateResult
        At least two replicates.
    baseline : str
        Estimator in the denominator of the efficiency ratio; the ``eff``
        column is NaN when it is absent.

    Returns
    -------
    table1, table2 : DataFrame
    """
    if len(results) < 2:
        raise InputError("metrics need at least two replicates")
    truth = np.array([r.truth for r in results])  # (R, D)
    names = [n for n in ESTIMATORS if n in results[0].points] + [
        n for n in results[0].points if n not in ESTIMATORS
    ]
    ybar = truth.mean(axis=0)
    emp_mse = {}
    t1 = []
    for name in names:
        pts = np.array([r.points[name] for r in results])
        err = pts - truth
        emp_mse[name] = np.mean(err**2, axis=0)
        relbias = 100 * err.mean(axis=0) / ybar
        rrmse = 100 * np.sqrt(emp_mse[name]) / ybar
        t1.append([name, np.median(relbias), np.median(rrmse)])
    t1 = pd.DataFrame(t1, columns=["estimator", "median_relbias_pct", "median_rrmse_pct"])
    if baseline in emp_mse:
        t1["eff"] = [np.median(100 * emp_mse[n] / emp_mse[baseline]) for n in names]
    else:
        t1["eff"] = np.nan
    t2 = []
    for name in names:
        if name not in results[0].mse:
            continue
        est = np.sqrt(np.maximum(np.array([r.mse[name] for r in results]), 0.0))
        rmse = np.sqrt(emp_mse[name])
        rb = 100 * (est.mean(axis=0) - rmse) / rmse
        rr = 100 * np.sqrt(np.mean((est - rmse) ** 2, axis=0)) / rmse
        t2.append([name, np.median(rb), np.median(rr)])
    t2 = pd.DataFrame(t2, columns=["estimator", "median_relbias_pct", "median_rrmse_pct"])
    return t1, t2


def _diagnostic_frame(results):
    rows = []
    for res in results:
        for name, d in res.diagnostics.items():
            if name.startswith("_"):
                continue
            rows.append(dict(replicate=res.replicate, estimator=name, **d))
    return pd.DataFrame(rows)


def _progress(k, total, stream):
    if stream is not None and (k == total or k % max(1, total // 20) == 0):
        print(f"replicate {k}/{total}", file=stream, flush=True)


def _safe_replicate(config, r):
    try:
        return run_replicate(config, r)
    except (ConvergenceError, np.linalg.LinAlgError, LinkageSAEError) as exc:
        return (r, f"{type(exc).__name__}: {exc}")


def run_monte_carlo(config, progress=None):
    """Run ``config.replicates`` independent replicates and aggregate them.

    Replicates whose fits fail are logged and dropped; more than 2% failures
    abort the study with ``ConvergenceError``.
    """
    R = config.replicates
    if R < 2:
        warnings.warn("fewer than two replicates: metrics are undefined", RuntimeWarning)
    if config.n_jobs != 1:
        from joblib import Parallel, delayed

        outs = Parallel(n_jobs=config.n_jobs)(delayed(_safe_replicate)(config, r) for r in range(R))
        _progress(R, R, progress)
    else:
        outs = []
        for r in range(R):
            outs.append(_safe_replicate(config, r))
            _progress(r + 1, R, progress)
    results = [o for o in outs if isinstance(o, ReplicateResult)]
    failures = [o for o in outs if not isinstance(o, ReplicateResult)]
    for r, msg in failures:
        log.warning("replicate %d excluded: %s", r, msg)
    if len(failures) > MAX_FAILURE_RATE * R:
        raise ConvergenceError(
            f"{len(failures)} of {R} replicates failed (limit {MAX_FAILURE_RATE:.0%})",
            norms={"failures": failures},
        )
    if len(results) >= 2:
        t1, t2 = metrics(results)
    else:
        t1, t2 = _single_tables(results, config)
    return SimulationReport(t1, t2, results, failures, _diagnostic_frame(results))


def _single_tables(results, config):
    names = list(results[0].points) if results else list(config.estimators)
    t1 = pd.DataFrame(
        {"estimator": names, "median_relbias_pct": np.nan, "median_rrmse_pct": np.nan, "eff": np.nan}
    )
    t2 = pd.DataFrame({"estimator": names, "median_relbias_pct": np.nan, "median_rrmse_pct": np.nan})
    if results:
        r = results[0]
        ybar = r.truth
        t1["median_relbias_pct"] = [
            np.median(100 * (r.points[n] - ybar) / ybar) for n in names
        ]
        t1["median_rrmse_pct"] = [
            np.median(100 * np.abs(r.points[n] - ybar) / ybar) for n in names
        ]
    return t1, t2


def scatter_dump(config, replicate=0):
    """Unit-level ``x, y, y_star, mislinked`` of one replicate's population."""
    pop = generate_population(config, config.rng(replicate, "population"))
    pop = apply_linkage(pop, config.lambdas, config.rng(replicate, "linkage"))
    df = pop.to_frame()
    df["mislinked"] = pop.mislinked
    return df


# -- design-based mode ----------------------------------------------------


def proportional_allocation(N_area, n, minimum=5):
    """Area sample sizes proportional to ``N_area`` with a floor."""
    N_area = np.asarray(N_area)
    raw = n * N_area / N_area.sum()
    alloc = np.maximum(np.round(raw).astype(int), minimum)
    return np.minimum(alloc, N_area)


def run_design_based(pop, lambdas, n, config, replicates=None, seed=None, progress=None):
    """Repeated sampling from a fixed (linked) population.

    Parameters
    ----------
    pop : PopulationFrame
        Must hold ``y``; ``y_star`` is drawn once if missing.
    lambdas : array-like
        Block probabilities in the order of ``pop.block_labels``.
    n : int
        Total sample size, allocated proportionally (minimum 5 per area).
    config : ScenarioConfig
        Supplies the estimator list, Huber constant and grid.
    """
    R = replicates or config.replicates
    base = config.base_seed if seed is None else seed
    lambdas = np.asarray(lambdas, dtype=float)
    if pop.y_star is None:
        pop = apply_linkage(pop, lambdas, np.random.default_rng([base, 0, STAGES["linkage"]]))
    N_area = np.bincount(pop.area, minlength=pop.n_areas)
    alloc = proportional_allocation(N_area, n)
    truth = pop.true_means()
    results, failures = [], []
    for r in range(R):
        rng = np.random.default_rng([base, r, STAGES["sample"]])
        sample, _ = draw_sample(pop, alloc, rng, lambdas, moments=config.moments)
        try:
            results.append(estimate_all(sample, config, truth, r))
        except (ConvergenceError, np.linalg.LinAlgError, LinkageSAEError) as exc:
            failures.append((r, str(exc)))
        _progress(r + 1, R, progress)
    if len(failures) > MAX_FAILURE_RATE * R:
        raise ConvergenceError(f"{len(failures)} of {R} replicates failed")
    t1, t2 = metrics(results)
    return SimulationReport(t1, t2, results, failures, _diagnostic_frame(results))
