import math

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from linkage_sae import resource_path
from linkage_sae.exceptions import InputError
from linkage_sae.simulation import (
    ReplicateResult,
    ScenarioConfig,
    apply_linkage,
    draw_sample,
    generate_population,
    metrics,
    proportional_allocation,
    run_design_based,
    run_monte_carlo,
    run_replicate,
    scatter_dump,
)


def _result(r, truth, **points):
    return ReplicateResult(r, np.asarray(truth, float), {k: np.asarray(v, float) for k, v in points.items()}, {})


def test_metrics_hand_arithmetic():
    results = [_result(0, [100.0], EBLUP=[101.0]), _result(1, [100.0], EBLUP=[99.0])]
    t1, _ = metrics(results)
    row = t1.iloc[0]
    assert row["median_relbias_pct"] == pytest.approx(0.0)
    assert row["median_rrmse_pct"] == pytest.approx(1.0)
    assert row["eff"] == 100.0


def test_metrics_exact_estimator():
    truth = [[10.0, 20.0], [11.0, 19.0]]
    results = [_result(r, t, EBLUP=t) for r, t in enumerate(truth)]
    t1, _ = metrics(results, baseline="missing")
    assert t1["median_relbias_pct"].iloc[0] == 0.0
    assert t1["median_rrmse_pct"].iloc[0] == 0.0
    assert t1["eff"].isna().all()


def test_metrics_efficiency_and_mse_diagnostics():
    results = []
    for r, err in enumerate([1.0, -1.0, 1.0, -1.0]):
        res = _result(r, [50.0, 60.0], EBLUP=[50 + err, 60 + err], MQ=[50 + 2 * err, 60 + 2 * err])
        res.mse["EBLUP"] = np.array([1.0, 1.0])
        res.mse["MQ"] = np.array([1.0, 1.0])
        results.append(res)
    t1, t2 = metrics(results)
    assert t1.set_index("estimator").loc["MQ", "eff"] == pytest.approx(400.0)
    t2 = t2.set_index("estimator")
    # estimated root MSE 1 against empirical 1 and 2
    assert t2.loc["EBLUP", "median_relbias_pct"] == pytest.approx(0.0)
    assert t2.loc["MQ", "median_relbias_pct"] == pytest.approx(-50.0)


def test_metrics_need_two_replicates():
    with pytest.raises(InputError):
        metrics([_result(0, [1.0], EBLUP=[1.0])])


def test_metrics_replicate_order_irrelevant():
    rng = np.random.default_rng(0)
    results = [
        _result(r, 100 + rng.normal(size=3), EBLUP=100 + rng.normal(size=3), MQ=100 + rng.normal(size=3))
        for r in range(6)
    ]
    a, _ = metrics(results)
    b, _ = metrics(results[::-1])
    pd.testing.assert_frame_equal(a, b, check_exact=False, rtol=1e-12)


def test_population_layout():
    cfg = ScenarioConfig()
    pop = generate_population(cfg, cfg.rng(0, "population"))
    assert pop.size == 4000
    counts = pd.crosstab(pop.area, pop.block).to_numpy()
    assert (counts == 25).all()


def test_population_mean_and_area_variance():
    cfg = ScenarioConfig(D=4000, N_i=100, units_per_block=25)
    pop = generate_population(cfg, np.random.default_rng(1))
    Ex = math.exp(1.0 + 0.5**2 / 2)
    assert Ex == pytest.approx(3.0802, abs=1e-4)
    se = math.sqrt(np.var(pop.y) / pop.size)
    assert abs(pop.y.mean() - (100 + 5 * Ex)) < 4 * se
    u = pop.extras["u"]
    assert u.var() == pytest.approx(3.0, rel=4 * math.sqrt(2 / len(u)))


def test_outlier_areas_use_inflated_variance():
    cfg = ScenarioConfig(scenario="eu", D=40, outlier_areas=40, N_i=4, n_i=2, units_per_block=1)
    u = np.concatenate(
        [generate_population(cfg, np.random.default_rng(k)).extras["u"] for k in range(50)]
    )
    assert u.var() == pytest.approx(20.0, rel=0.15)


def test_linkage_preserves_cells_and_perfect_blocks():
    cfg = ScenarioConfig()
    pop = generate_population(cfg, cfg.rng(0, "population"))
    linked = apply_linkage(pop, cfg.lambdas, cfg.rng(0, "linkage"))
    cell, _, _ = pop.cell_codes()
    np.testing.assert_allclose(
        np.bincount(cell, weights=linked.y_star), np.bincount(cell, weights=pop.y)
    )
    perfect = pop.block == 0
    np.testing.assert_array_equal(linked.y_star[perfect], pop.y[perfect])
    assert not linked.mislinked[perfect].any()


def test_overall_mislink_rate():
    cfg = ScenarioConfig()
    rates = []
    for r in range(5):
        pop = generate_population(cfg, cfg.rng(r, "population"))
        rates.append(apply_linkage(pop, cfg.lambdas, cfg.rng(r, "linkage")).mislinked.mean())
    assert np.mean(rates) == pytest.approx(0.275, abs=0.03)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31), lam=st.floats(0.0, 1.0))
def test_linkage_cell_totals_property(seed, lam):
    cfg = ScenarioConfig(D=3, N_i=8, units_per_block=2)
    pop = generate_population(cfg, np.random.default_rng(seed))
    linked = apply_linkage(pop, [lam] * 4, np.random.default_rng(seed + 1))
    cell, _, _ = pop.cell_codes()
    np.testing.assert_allclose(
        np.bincount(cell, weights=linked.y_star), np.bincount(cell, weights=pop.y)
    )
    np.testing.assert_array_equal(linked.area, pop.area)


def test_sample_sizes_and_census():
    cfg = ScenarioConfig()
    pop = apply_linkage(generate_population(cfg, cfg.rng(0, "population")), cfg.lambdas, cfg.rng(0, "linkage"))
    sample, rows = draw_sample(pop, 5, cfg.rng(0, "sample"), cfg.lambdas)
    assert sample.n == 200
    np.testing.assert_array_equal(sample.n_area, 5)
    census, rows = draw_sample(pop, 100, cfg.rng(0, "sample"), cfg.lambdas)
    np.testing.assert_array_equal(rows, np.arange(pop.size))
    with pytest.raises(InputError):
        draw_sample(pop, 101, cfg.rng(0, "sample"), cfg.lambdas)


def test_inclusion_frequencies_uniform():
    cfg = ScenarioConfig(D=2, N_i=20, units_per_block=5)
    pop = apply_linkage(generate_population(cfg, np.random.default_rng(0)), cfg.lambdas, np.random.default_rng(1))
    rng = np.random.default_rng(2)
    R = 20000
    hits = np.zeros(pop.size)
    for _ in range(R):
        _, rows = draw_sample(pop, 1, rng, cfg.lambdas)
        hits[rows] += 1
    p = 1 / 20
    z = (hits / R - p) / math.sqrt(p * (1 - p) / R)
    assert np.abs(z).max() < 4


def test_config_roundtrip_and_validation(tmp_path):
    cfg = ScenarioConfig.from_toml(resource_path("scenario_00.toml"))
    assert cfg == ScenarioConfig()
    assert ScenarioConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(InputError):
        ScenarioConfig.from_dict({"scenaro": "00"})
    with pytest.raises(InputError):
        ScenarioConfig(scenario="xx")
    with pytest.raises(InputError):
        ScenarioConfig(estimators=("EBLUP", "BHF"))
    bad = tmp_path / "bad.toml"
    bad.write_text('[scenario_config]\nunknown_key = 1\n')
    with pytest.raises(InputError):
        ScenarioConfig.from_toml(bad)


def test_seed_streams_are_independent_of_order():
    cfg = ScenarioConfig(D=3, N_i=8, units_per_block=2, replicates=3, estimators=("EBLUP", "*EBLUP"))
    a = run_replicate(cfg, 2)
    run_replicate(cfg, 0)
    b = run_replicate(cfg, 2)
    np.testing.assert_array_equal(a.points["EBLUP"], b.points["EBLUP"])


def test_monte_carlo_deterministic(tmp_path):
    cfg = ScenarioConfig(D=6, N_i=20, n_i=4, units_per_block=5, replicates=3)
    a = run_monte_carlo(cfg)
    b = run_monte_carlo(cfg)
    a.write(tmp_path / "a", replicates=True)
    b.write(tmp_path / "b", replicates=True)
    for name in ("table1.csv", "table2.csv", "replicates.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    t1 = a.table1.set_index("estimator")
    assert t1.loc["EBLUP", "eff"] == 100.0
    assert (t1["eff"] > 0).all()
    assert list(a.table1.columns) == ["estimator", "median_relbias_pct", "median_rrmse_pct", "eff"]


def test_single_replicate_warns():
    cfg = ScenarioConfig(D=4, N_i=20, n_i=4, units_per_block=5, replicates=1, estimators=("EBLUP",))
    with pytest.warns(RuntimeWarning):
        rep = run_monte_carlo(cfg)
    assert rep.n_replicates == 1
    assert np.isfinite(rep.table1["median_rrmse_pct"]).all()


def test_scatter_dump_columns():
    df = scatter_dump(ScenarioConfig(D=2))
    assert {"x1", "y", "y_star", "mislinked"} <= set(df.columns)


def test_proportional_allocation():
    alloc = proportional_allocation(np.array([1000, 100, 30, 3]), 100)
    np.testing.assert_array_equal(alloc, [88, 9, 5, 3])


def test_design_based_rankings_at_perfect_linkage():
    # fixed population with genuine outliers and every block perfectly linked
    cfg = ScenarioConfig(scenario="eu", D=20, N_i=100, replicates=20, base_seed=99)
    pop = generate_population(cfg, np.random.default_rng(2024))
    report = run_design_based(pop, np.ones(4), 200, cfg)
    t1 = report.table1.set_index("estimator")
    for name in ("EBLUP", "REBLUP", "MQ"):
        # with lambda = 1 the corrected estimators reduce to the classical ones
        assert t1.loc["*" + name, "eff"] == pytest.approx(t1.loc[name, "eff"], rel=1e-6)
    assert t1.loc["EBLUP", "eff"] == 100.0
    assert t1.loc["REBLUP", "eff"] < 100.0
    assert t1.loc["MQ", "eff"] < 100.0
