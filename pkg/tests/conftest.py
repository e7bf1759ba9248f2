import numpy as np
import pytest

from linkage_sae.lmm import area_shrinkage
from linkage_sae.simulation import ScenarioConfig, apply_linkage, draw_sample, generate_population


def make_sample(scenario="00", D=5, N_i=100, n_i=20, lambdas=(1.0, 0.9, 0.6, 0.4), seed=3):
    """A linked sample drawn from one simulated population."""
    cfg = ScenarioConfig(scenario=scenario, D=D, N_i=N_i, n_i=n_i, lambdas=lambdas, base_seed=seed)
    pop = generate_population(cfg, cfg.rng(0, "population"))
    pop = apply_linkage(pop, cfg.lambdas, cfg.rng(0, "linkage"))
    sample, _ = draw_sample(pop, n_i, cfg.rng(0, "sample"), cfg.lambdas)
    return sample, pop


def fd_lambda_gradient(fit, variant, h=1e-6):
    """Central differences of the area shrinkage vectors in each block lambda."""
    s = fit.sample
    out = np.zeros((s.n, s.n_blocks))
    for q in range(s.n_blocks):
        lp, lm = s.lambdas.copy(), s.lambdas.copy()
        lp[q] += h
        lm[q] -= h
        for lam, sign in ((lp, 1.0), (lm, -1.0)):
            lu = s.with_lambdas(lam).lam_unit
            for rows, b in area_shrinkage(s, fit.beta, fit.delta, lam):
                val = lu[rows] * b if variant == "starstar" else b
                out[rows, q] += sign * val / (2 * h)
    return out


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])


@pytest.fixture(scope="session")
def linked():
    """5 areas, 100 sampled units, blocks with lambda (1, .9, .6, .4)."""
    return make_sample()[0]


@pytest.fixture(scope="session")
def linked_pop():
    return make_sample()


@pytest.fixture(scope="session")
def study_sample():
    """One sample of the default 40-area design (n_i = 5)."""
    return make_sample(D=40, n_i=5, seed=11)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
