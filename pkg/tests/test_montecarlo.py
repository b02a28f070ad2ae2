import numpy as np
import pytest

from volex import (
    ConstantVolume,
    ExecutionSchedule,
    ExperimentConfig,
    PerturbedOU,
    TimeDepBS,
    TimeGrid,
    epsilon_sweep,
    estimate_cost,
    evaluate_strategies,
    expected_vwap,
    sample_path,
    sample_strategy_paths,
    simulate_adaptive,
)
from volex.expansion import ExpansionCoeffs
from volex.montecarlo import _adaptive_block, _liquidation_start
from volex.volume import sample_block


GRID = TimeGrid(1.0, 500)


def make_config(params, **over):
    base = dict(
        params=params,
        grid=GRID,
        u_bar=100.0,
        sigma=0.3,
        rhos=[2.0],
        epsilons=[0.0, 0.5],
        strategies=["expected_vwap", "adaptive", "exact_vwap"],
        n_paths=2000,
        seed=7,
        delta_liq=0.02,
    )
    base.update(over)
    return ExperimentConfig(**base)


def test_config_validation(params):
    with pytest.raises(ValueError):
        make_config(params, n_paths=1)
    with pytest.raises(ValueError):
        make_config(params, delta_liq=0.5)
    with pytest.raises(ValueError):
        make_config(params, strategies=["momentum"])


def test_adaptive_eps_zero_equals_expected_vwap(params):
    # with the noise switched off the feedback collapses onto the static
    # schedule node for node, up to the forced-liquidation window
    model = PerturbedOU(100.0, 0.0, 0.3, 0.3, 1.0)
    coeffs = ExpansionCoeffs.from_ou_model(model, GRID)
    path = sample_path(model, GRID, seed=5)
    adaptive = simulate_adaptive(params, model, coeffs, path, 0.02)
    static = expected_vwap(params, model, GRID)
    k_liq = _liquidation_start(GRID, 0.02)
    rel = np.max(np.abs(adaptive.rates[:k_liq] - static.rates[:k_liq]) / static.rates[:k_liq])
    assert rel < 1e-12
    assert adaptive.sell_off_error() < 1e-9 * params.x0


def test_adaptive_constant_volume_is_twap(params):
    model = PerturbedOU(100.0, 0.0, 2.0, 0.3, 1.0)
    coeffs = ExpansionCoeffs.from_ou_model(model, GRID)
    path = sample_path(model, GRID, seed=5)
    sched = simulate_adaptive(params, model, coeffs, path, 0.02)
    k_liq = _liquidation_start(GRID, 0.02)
    np.testing.assert_allclose(sched.rates[:k_liq], 10.0, rtol=1e-12)


def test_adaptivity_audit(params):
    # rates up to step k are bit-identical after future path values change
    model = PerturbedOU(100.0, 0.3, 2.0, 0.3, 1.0)
    coeffs = ExpansionCoeffs.from_ou_model(model, GRID)
    coeffs.tabulate()
    v, z = sample_block(model, GRID, seed=11, n_paths=8)
    r1, _, _ = _adaptive_block(coeffs, v, z, GRID, params.x0, 0.02)
    k = 200
    v2, z2 = v.copy(), z.copy()
    v2[:, k + 1 :] *= 1.7
    z2[:, k + 1 :] -= 0.3
    r2, _, _ = _adaptive_block(coeffs, v2, z2, GRID, params.x0, 0.02)
    np.testing.assert_array_equal(r1[:, : k + 1], r2[:, : k + 1])
    assert not np.array_equal(r1[:, k + 1 :], r2[:, k + 1 :])


def test_adaptive_tracks_realized_volume_fluctuations(params):
    # rate increments co-move with the anticipating strategy's, far more than
    # with the deterministic static schedule's (which carries no noise)
    cols = sample_strategy_paths(make_config(params, rhos=[0.3], epsilons=[0.3]), 0.3, 0.3)
    k = int(0.8 * GRID.n_steps)
    d_adap = np.diff(cols["x_adap"][:k])
    corr_ant = np.corrcoef(d_adap, np.diff(cols["x_ant"][:k]))[0, 1]
    corr_stat = np.corrcoef(d_adap, np.diff(cols["x_stat"][:k]))[0, 1]
    assert corr_ant > 0.8
    assert corr_ant > corr_stat


def test_estimate_expected_vwap_matches_plug_in(params):
    # MC mean of a deterministic schedule equals X0^2/U_T (discrete) exactly
    # in expectation; check against the continuum value within 3 SE
    bs = TimeDepBS(100.0, 0.5, 0.3, 1.0)
    rep = estimate_cost("expected_vwap", bs, params, 20_000, GRID, seed=3)
    u = 100.0 * np.exp(0.455 * GRID.nodes())
    u_total = np.sum(u[:-1]) * GRID.dt
    assert abs(rep.j_estimate - params.x0**2 / u_total) < 3.0 * rep.stderr


def test_estimate_exact_vwap_identity(params):
    # the quadrature along each path must reproduce X0^2/V_T to rounding
    model = PerturbedOU(100.0, 0.5, 2.0, 0.3, 1.0)
    rep = estimate_cost("exact_vwap", model, params, 5000, GRID, seed=9)
    v, _ = sample_block(model, GRID, seed=9, n_paths=5000)
    v_total = np.sum(v[:, :-1], axis=1) * GRID.dt
    assert rep.j_estimate == pytest.approx(float(np.mean(params.x0**2 / v_total)), rel=1e-12)


def test_twap_optimal_under_constant_volume(params):
    model = ConstantVolume(100.0)
    reports, _ = evaluate_strategies(model, params, GRID, ["twap", "expected_vwap"], 10, seed=1)
    front_loaded = ExecutionSchedule.from_rates(
        20.0 * np.exp(-3.0 * GRID.nodes()) / (1.0 - np.exp(-3.0)) * 3.0 / 2.0, params, GRID
    )
    from volex import pathwise_cost

    path = sample_path(model, GRID, seed=1)
    assert reports["twap"].j_estimate <= reports["expected_vwap"].j_estimate + 1e-12
    assert reports["twap"].j_estimate < pathwise_cost(front_loaded, path, params, GRID)


def test_se_scaling(params):
    model = PerturbedOU(100.0, 0.5, 2.0, 0.3, 1.0)
    rep_small = estimate_cost("exact_vwap", model, params, 4000, GRID, seed=4)
    rep_big = estimate_cost("exact_vwap", model, params, 16_000, GRID, seed=4)
    ratio = rep_small.stderr / rep_big.stderr
    assert abs(ratio - 2.0) < 0.4


def test_common_random_numbers(params):
    # all strategies in one row see identical paths: at eps=0 every strategy
    # produces the same cost to rounding
    model = PerturbedOU(100.0, 0.0, 2.0, 0.3, 1.0)
    reports, _ = evaluate_strategies(
        model, params, GRID, ["twap", "expected_vwap", "adaptive", "exact_vwap"], 100, seed=2
    )
    js = [r.j_estimate for r in reports.values()]
    assert max(js) - min(js) < 1e-12


def test_sweep_rows_and_ordering(params):
    config = make_config(params)
    result = epsilon_sweep(config)
    assert len(result.rows) == 2 * 3
    for eps in (0.0, 0.5):
        r_ant = result.report(eps, 2.0, "exact_vwap")
        for s in ("expected_vwap", "adaptive"):
            bound = result.report(eps, 2.0, s).j_estimate + 3.0 * result.joint_se(eps, 2.0, "exact_vwap", s)
            assert r_ant.j_estimate <= bound
    assert (0.5, 2.0) in result.diff_stats


def test_sweep_csv_schema(tmp_path, params):
    result = epsilon_sweep(make_config(params, epsilons=[0.3], n_paths=200))
    out = tmp_path / "sweep.csv"
    result.to_csv(out)
    lines = out.read_text().splitlines()
    assert lines[0] == "epsilon,rho,strategy,J,IS,stderr,n_paths"
    assert len(lines) == 1 + 3


def test_liquidation_window_soft_sensitivity(params):
    # halving the liquidation window moves the adaptive estimate by < 1 SE
    model = PerturbedOU(100.0, 0.3, 2.0, 0.3, 1.0)
    rep_a, _ = evaluate_strategies(model, params, GRID, ["adaptive"], 10_000, seed=6, delta_liq=0.02)
    rep_b, _ = evaluate_strategies(model, params, GRID, ["adaptive"], 10_000, seed=6, delta_liq=0.01)
    delta = abs(rep_a["adaptive"].j_estimate - rep_b["adaptive"].j_estimate)
    assert delta < rep_a["adaptive"].stderr


def test_floor_counter_reported(params):
    # large eps with slow reversion pushes some brackets negative
    model = PerturbedOU(100.0, 1.0, 0.3, 0.3, 1.0)
    _, extras = evaluate_strategies(model, params, GRID, ["adaptive"], 4000, seed=12)
    assert extras["floors"] >= 0
    assert isinstance(extras["floors"], int)


def test_sample_paths_columns(params):
    cols = sample_strategy_paths(make_config(params), 2.0, 0.5)
    assert set(cols) == {"t", "v", "x_stat", "x_adap", "x_ant"}
    assert all(len(c) == GRID.n_nodes for c in cols.values())
