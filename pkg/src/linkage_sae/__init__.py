"""Small-area estimation corrected for record-linkage errors.

Three predictors of area means are provided for a response observed through
a probabilistic record linkage with exchangeable errors inside blocks: the
linkage-corrected EBLUP (:class:`EBLUPStar`), robust EBLUP
(:class:`REBLUPStar`) and M-quantile predictor (:class:`MQStar`), each with
an analytic MSE estimator.  :mod:`linkage_sae.simulation` reproduces
model-based Monte Carlo comparisons.
"""
from importlib.resources import files

from .data import LinkedSample, PopulationFrame
from .exceptions import (
    ConvergenceError,
    DegenerateCellError,
    InputError,
    LinkageSAEError,
    NotFittedError,
)
from .linkage import (
    AuditSample,
    corrected_design,
    estimate_lambda_audit,
    expected_sampled_permutation,
    gamma,
    linkage_variance,
    sample_ele_permutation,
)
from .lmm import EBLUPStar, fit_lmm_linked, mse_eblup_star, mse_eblup_starstar
from .mquantile import MQStar, fit_mq_tau, mse_mq_star
from .robust import REBLUPStar, fit_reblup_star, mse_reblup_star, sandwich_cov
from .simulation import ScenarioConfig, run_design_based, run_monte_carlo

__version__ = "0.1.0"

__all__ = [
    "LinkedSample",
    "PopulationFrame",
    "ConvergenceError",
    "DegenerateCellError",
    "InputError",
    "LinkageSAEError",
    "NotFittedError",
    "AuditSample",
    "corrected_design",
    "estimate_lambda_audit",
    "expected_sampled_permutation",
    "gamma",
    "linkage_variance",
    "sample_ele_permutation",
    "EBLUPStar",
    "fit_lmm_linked",
    "mse_eblup_star",
    "mse_eblup_starstar",
    "MQStar",
    "fit_mq_tau",
    "mse_mq_star",
    "REBLUPStar",
    "fit_reblup_star",
    "mse_reblup_star",
    "sandwich_cov",
    "ScenarioConfig",
    "run_design_based",
    "run_monte_carlo",
    "resource_path",
]


def resource_path(name):
    """Path of a bundled file (scenario configs, example dataset)."""
    return str(files(__name__) / "resources" / name)
