import math

import numpy as np
import pytest

from lago.errors import ConfigError, RhoOutOfRange
from lago.optimizer import LINEAR_COST
from lago.simulation import (
    REFERENCE_Z_VALUES,
    ScenarioConfig,
    aggregate,
    eta_from_rho,
    run_replicate,
    run_replicates,
    run_scenario,
    simulate_stage,
    simulate_trial,
    stream,
)


def _config(**over):
    base = dict(
        J=4, n_by_centre_stage=[20, 40], beta_true=[-1.70, -0.70], beta_z=2.42,
        rho_targets=[0.05, 0.07], x_stage1=[2.0, 1.5], bounds=[[0, 4], [0, 3]],
        cost=LINEAR_COST, goal=-5.0, replicates=6, seed=11, grid_resolution=0.1,
    )
    base.update(over)
    return ScenarioConfig(**base)


def test_eta_values():
    for rho, eta in [(0.05, 0.0501), (0.07, 0.0702), (0.10, 0.1005), (0.20, 0.2041)]:
        assert round(eta_from_rho(rho), 4) == eta
    assert eta_from_rho(0.0) == 0.0
    with pytest.raises(RhoOutOfRange):
        eta_from_rho(1.0)


def test_noiseless_intervention_outcome():
    cfg = _config(noise_sd=0.0, rho_targets=[0, 0], beta_z=0.0, xi_sd=0.0, arm_ratio=1.0)
    data = simulate_stage(cfg, 1, [2.0, 1.5], np.zeros(4), stream(1, 0, 1, "stage_data"))
    np.testing.assert_allclose(data.outcome, -4.45, atol=1e-12)


def test_correlation_with_centre_characteristic():
    cfg = _config(J=1000, n_by_centre_stage=[100, 0], rho_targets=[0.05, 0.07], arm_ratio=1.0,
                  centre_Z_mode="redraw_each_replicate")
    Z = cfg.centre_Z(0)
    data = simulate_stage(cfg, 1, [2.0, 1.5], Z, stream(3, 0, 1, "stage_data"))
    r = np.corrcoef(data.actual[:, 0], Z[data.centre - 1])[0, 1]
    assert r == pytest.approx(0.05, abs=0.01)


def test_control_mean_tracks_centre_effect():
    cfg = _config(J=50, n_by_centre_stage=[400, 0], centre_Z_mode="redraw_each_replicate")
    Z = cfg.centre_Z(2)
    data = simulate_stage(cfg, 1, [2.0, 1.5], Z, stream(5, 2, 1, "stage_data"))
    ctrl = data.arm == 0
    assert np.all(data.actual[ctrl] == 0)
    expected = 2.42 * Z[data.centre[ctrl] - 1].mean()
    se = 1 / math.sqrt(ctrl.sum())
    assert abs(data.outcome[ctrl].mean() - expected) < 4 * se


def test_arm_split_is_exact():
    cfg = _config(n_by_centre_stage=[21, 40])
    data = simulate_stage(cfg, 1, [2.0, 1.5], np.zeros(4), stream(0, 0, 1, "stage_data"))
    for j in range(1, 5):
        assert data.arm[data.centre == j].sum() == 10 or data.arm[data.centre == j].sum() == 11


def test_replicate_is_reproducible_and_order_free():
    cfg = _config()
    forward = run_replicates(cfg, range(6))
    backward = run_replicates(cfg, reversed(range(6)))
    a = aggregate(cfg, forward)
    b = aggregate(cfg, backward)
    assert a == b
    one = run_replicate(cfg, 3)
    np.testing.assert_array_equal(one.beta_hat, forward[3].beta_hat)


def test_parallel_matches_serial():
    cfg = _config(replicates=4)
    assert run_scenario(cfg, workers=2) == run_scenario(cfg)


def test_noiseless_limit_recovers_true_optimum():
    cfg = _config(noise_sd=0.0, replicates=3)
    for i in range(3):
        m = run_replicate(cfg, i)
        assert not m.failed
        np.testing.assert_allclose(m.xopt_final, m.true_xopt, atol=1e-8)
        np.testing.assert_allclose(m.beta_hat, cfg.beta_true, atol=1e-8)


def test_without_lago_at_true_optimum_matches_lago():
    cfg = _config(noise_sd=0.0, replicates=2, rho_targets=[0, 0], beta_z=0.0)
    x_true = [5 / 1.7, 0.0]
    lago = run_scenario(cfg)
    plain = run_scenario(cfg.with_overrides(use_lago=False, x_stage1=x_true))
    assert plain["xopt"]["final"]["rmse"] == pytest.approx(lago["xopt"]["final"]["rmse"], abs=1e-8)
    for a, b in zip(plain["components"], lago["components"]):
        assert a["rel_bias_pct"] == pytest.approx(b["rel_bias_pct"], abs=1e-6)


def test_rank_deficient_replicates_are_counted():
    cfg = _config(x_stage1=[0.0, 0.0], rho_targets=[0, 0], xi_sd=0.0, use_lago=False, replicates=2)
    report = run_scenario(cfg)
    assert report["failed"] == 2


def test_simulated_trial_matches_replicate_fit():
    from lago.model import fit

    cfg = _config()
    data = simulate_trial(cfg, 2)
    np.testing.assert_array_equal(fit(data).beta_A, run_replicate(cfg, 2).beta_hat)


def test_fixed_centre_values():
    assert len(REFERENCE_Z_VALUES) == 20
    cfg = _config(J=6, centre_Z_mode="fixed_list")
    np.testing.assert_array_equal(cfg.centre_Z(0), cfg.centre_Z(99))
    np.testing.assert_array_equal(cfg.centre_Z(0), REFERENCE_Z_VALUES[:6])


def test_config_validation_names_key():
    with pytest.raises(ConfigError) as info:
        _config(rho_targets=[1.2, 0.07])
    assert info.value.key == "rho_targets"
    with pytest.raises(ConfigError) as info:
        _config(replicates=0)
    assert info.value.key == "replicates"
    with pytest.raises(ConfigError) as info:
        ScenarioConfig.from_mapping({"J": 2, "colour": "red", "cost": {"kind": "linear", "coefficients": [1]}})
    assert info.value.key == "colour"
    with pytest.raises(ConfigError) as info:
        ScenarioConfig.from_mapping({"J": 2})
    assert info.value.key == "cost"


def test_mapping_round_trip():
    cfg = _config(eta_centre=[[0.1, 0.0]] * 4, xi_sd=[0.8, 0.6])
    again = ScenarioConfig.from_mapping(cfg.to_mapping())
    assert again.to_mapping() == cfg.to_mapping()


def test_lower_bound_policy_never_lowers_packages():
    cfg = _config(lower_bound_policy="previous_recommendation", replicates=5, noise_sd=3.0)
    for m in run_replicates(cfg):
        assert np.all(m.x_stage2 >= np.asarray(cfg.x_stage1) - 1e-12)


def test_aggregate_fields():
    report = run_scenario(_config())
    assert report["failed"] == 0
    for key in ("set_cp95", "set_perc", "bands_cp95", "alpha_combined", "true_opt1_q",
                "expected_out_actual_stage2", "cost_recommended_stage1"):
        assert key in report
    assert 0 <= report["set_perc"] <= 100
