"""Tests for scenario presets, twin experiments, cycling and sweeps."""

import logging

import numpy as np
import pytest

import bridgeflow.experiments as experiments
from bridgeflow.errors import ConfigError, NumericalError
from bridgeflow.experiments import (
    SCENARIOS,
    SweepResult,
    build_scenario,
    generate_truth_and_obs,
    run_assimilation_cycles,
    run_sweep_cell,
    single_window_experiment,
    sweep,
    sweep_grid,
)
from bridgeflow.models import SweepCell, SweepConfig

LINEAR_2D_POSTERIOR_MEAN = [2.245352, 1.496942]
LINEAR_2D_POSTERIOR_COV = np.array([[0.0085962, 0.0039216], [0.0039216, 0.0502811]])


def _small_sweep(**updates) -> SweepConfig:
    settings = {"ensembles": [5], "dtobs_values": [0.05], "inflations": [0.0, 0.1], "cycles": 10, "seed": 3}
    settings.update(updates)
    return SweepConfig(**settings)


# ---------------------------------------------------------------------------
# Presets
# ---------------------------------------------------------------------------


def test_all_presets_build():
    for name in SCENARIOS:
        assert build_scenario(name).name == name


def test_linear_2d_preset():
    scenario = build_scenario("linear-2d")
    assert scenario.sigma == 0.1
    assert scenario.dt == 0.001
    assert scenario.particles == 10_000
    assert scenario.linear_gaussian
    assert scenario.obs.y == pytest.approx([2.5])


def test_preset_schemes():
    assert build_scenario("pure-diffusion").scheme == "meanfield"
    assert build_scenario("pure-diffusion-printed").scheme == "meanfield"
    assert build_scenario("double-well").scheme == "meanfield"
    linear = build_scenario("linear-2d")
    assert (linear.scheme, linear.corrector) == ("euler", True)
    assert linear.assimilation_config(0).corrector


def test_robust_override_drops_preset_corrector():
    assert not build_scenario("linear-2d", {"scheme": "robust"}).corrector
    assert build_scenario("linear-2d", {"scheme": "robust", "corrector": True}).corrector


def test_lorenz63_preset():
    scenario = build_scenario("lorenz63")
    assert scenario.cycled
    assert scenario.dim == 3
    assert scenario.law == "pure-drift"
    assert scenario.assimilation_config(0).T == 0.05


def test_unknown_scenario():
    with pytest.raises(ConfigError, match="valid names: pure-diffusion"):
        build_scenario("lorenz96")


def test_unknown_override():
    with pytest.raises(ConfigError, match="valid keys"):
        build_scenario("linear-2d", {"ensemble_size": 10})


def test_none_overrides_are_ignored():
    assert build_scenario("lorenz63", {"particles": None}).particles == 10


def test_observation_overrides():
    scenario = build_scenario("pure-diffusion", {"R": 0.1, "y": 2.0})
    np.testing.assert_allclose(scenario.obs.R, [[0.1]])
    assert scenario.obs.y == pytest.approx([2.0])


def test_invalid_noise_override():
    with pytest.raises(ConfigError, match="invalid observation override"):
        build_scenario("pure-diffusion", {"R": -1.0})


def test_lambda_override():
    np.testing.assert_allclose(build_scenario("scalar-linear", {"lambda": -0.5}).drift.F, [[-0.5]])


def test_lambda_override_only_for_scalar_linear():
    with pytest.raises(ConfigError, match="scalar-linear"):
        build_scenario("linear-2d", {"lambda": 2.0})


def test_dtobs_override_sets_window():
    scenario = build_scenario("lorenz63", {"dtobs": 0.12})
    assert scenario.dtobs == 0.12
    assert scenario.T == 0.12


def test_dtobs_override_needs_cycled_scenario():
    with pytest.raises(ConfigError, match="single window"):
        build_scenario("linear-2d", {"dtobs": 0.1})


def test_small_double_well_ensemble_warns(caplog):
    with caplog.at_level(logging.WARNING, logger="bridgeflow.experiments"):
        build_scenario("double-well", {"particles": 50})
    assert "numerically unstable" in caplog.text


def test_double_well_prior_lies_on_parabola():
    ens = build_scenario("double-well").sample_prior(200, seed=1)
    assert ens.shape == (200, 2)
    assert np.allclose(ens[:, 1], 2.0 - 0.2 * ens[:, 0] ** 2)
    assert abs(ens[:, 0].mean() - 1.5) < 0.1


def test_gaussian_prior_sample():
    ens = build_scenario("linear-2d").sample_prior(4000, seed=1)
    assert np.allclose(ens.mean(axis=0), [1.0, 3.0], atol=0.02)


def test_cycled_scenario_has_no_prior():
    with pytest.raises(ConfigError, match="no prior"):
        build_scenario("lorenz63").sample_prior(10, seed=0)


def test_uncontrolled_config():
    assert build_scenario("lorenz63").assimilation_config(0, controls=False).law == "none"
    scalar = build_scenario("scalar-linear").assimilation_config(0, controls=False)
    assert (scalar.law, scalar.scheme) == ("none", "meanfield")
    pure = build_scenario("pure-diffusion").assimilation_config(0, controls=False)
    assert (pure.law, pure.scheme) == ("none", "meanfield")
    assert build_scenario("double-well").assimilation_config(0, controls=False).scheme == "euler"


# ---------------------------------------------------------------------------
# Twin experiments and cycling
# ---------------------------------------------------------------------------


def test_observations_follow_truth_for_tiny_noise():
    scenario = build_scenario("lorenz63", {"R": 1e-12})
    twin = generate_truth_and_obs(scenario, cycles=20, seed=1)
    assert twin.truth.shape == (20, 3)
    assert twin.cycles == 20
    assert np.allclose(twin.observations[:, 0], twin.truth[:, 0], atol=1e-5)


def test_twin_experiment_is_deterministic():
    scenario = build_scenario("lorenz63")
    first = generate_truth_and_obs(scenario, cycles=15, seed=4)
    second = generate_truth_and_obs(scenario, cycles=15, seed=4)
    other = generate_truth_and_obs(scenario, cycles=15, seed=5)
    assert np.array_equal(first.observations, second.observations)
    assert np.array_equal(first.truth, other.truth)
    assert not np.array_equal(first.observations, other.observations)


def test_twin_experiment_needs_cycled_scenario():
    with pytest.raises(ConfigError, match="not a cycled"):
        generate_truth_and_obs(build_scenario("linear-2d"), cycles=5)


@pytest.mark.parametrize("method", ["homotopy", "esrf"])
def test_collapsed_uncontrolled_ensemble_tracks_truth(method):
    """Starting on the truth without spread, the free ensemble reproduces the reference run."""
    scenario = build_scenario("lorenz63", {"init_spread": 0.0, "inflation": 0.0})
    twin = generate_truth_and_obs(scenario, cycles=50, seed=0)
    result = run_assimilation_cycles(twin, scenario, method, controls=False)
    assert result.rmse <= 1e-8


@pytest.mark.parametrize("method", ["homotopy", "esrf"])
def test_lorenz_filter_stays_locked(method):
    scenario = build_scenario("lorenz63")
    twin = generate_truth_and_obs(scenario, cycles=200, seed=2)
    result = run_assimilation_cycles(twin, scenario, method)
    assert result.means.shape == (200, 3)
    assert len(result.moments) == 200
    assert result.moments[-1][0] == pytest.approx(200 * 0.05)
    assert result.rmse < 1.5


def test_cycles_are_deterministic():
    scenario = build_scenario("lorenz63")
    twin = generate_truth_and_obs(scenario, cycles=30, seed=6)
    first = run_assimilation_cycles(twin, scenario, "homotopy", particles=5)
    second = run_assimilation_cycles(twin, scenario, "homotopy", particles=5)
    assert np.array_equal(first.means, second.means)


def test_cycle_failure_names_the_cycle(monkeypatch):
    def explode(*args, **kwargs):
        raise NumericalError("non-finite state for particle 0 at t=0.005")

    monkeypatch.setattr(experiments, "propagate_window", explode)
    scenario = build_scenario("lorenz63")
    twin = generate_truth_and_obs(scenario, cycles=3, seed=0)
    with pytest.raises(NumericalError, match="lorenz63 homotopy cycle 0: non-finite"):
        run_assimilation_cycles(twin, scenario, "homotopy")


def test_unknown_cycle_method():
    scenario = build_scenario("lorenz63")
    twin = generate_truth_and_obs(scenario, cycles=3, seed=0)
    with pytest.raises(ConfigError, match="unknown method"):
        run_assimilation_cycles(twin, scenario, "enkf")


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


def test_sweep_grid_order_and_size():
    grid = sweep_grid(SweepConfig())
    assert len(grid) == 180
    assert grid[0] == ("esrf", 5, 0.05, 0.0)
    assert grid[10] == ("homotopy", 5, 0.05, 0.0)
    assert grid[20] == ("esrf", 10, 0.05, 0.0)
    assert grid[-1] == ("homotopy", 15, 0.12, 0.225)


def test_sweep_cell_matches_direct_run():
    cell = run_sweep_cell("lorenz63", "esrf", 5, 0.05, 0.05, 0.005, 20, 1)
    scenario = build_scenario("lorenz63", {"dtobs": 0.05, "dt": 0.005, "cycles": 20})
    twin = generate_truth_and_obs(scenario, 20, 1)
    direct = run_assimilation_cycles(twin, scenario, "esrf", particles=5, inflation=0.05, seed=1)
    assert cell.rmse == direct.rmse
    assert cell.error is None


def test_sweep_cell_records_failure(monkeypatch, caplog):
    def explode(*args, **kwargs):
        raise NumericalError("lorenz63 homotopy cycle 4: singular")

    monkeypatch.setattr(experiments, "run_assimilation_cycles", explode)
    cell = run_sweep_cell("lorenz63", "homotopy", 5, 0.05, 0.0, 0.005, 10, 0)
    assert cell.rmse is None
    assert "cycle 4" in cell.error
    assert "failed" in caplog.text


def test_sweep_runs_grid_in_order():
    seen = []
    result = sweep(_small_sweep(), on_cell=seen.append)
    assert [(c.method, c.inflation) for c in result.cells] == [
        ("esrf", 0.0),
        ("esrf", 0.1),
        ("homotopy", 0.0),
        ("homotopy", 0.1),
    ]
    assert len(seen) == 4
    assert all(c.rmse is not None for c in result.cells)
    assert result.failures == []


def test_parallel_sweep_matches_serial():
    serial = sweep(_small_sweep())
    parallel = sweep(_small_sweep(workers=2))
    assert [c.rmse for c in parallel.cells] == [c.rmse for c in serial.cells]


def test_sweep_rejects_empty_grid():
    with pytest.raises(ConfigError, match="non-empty"):
        sweep(_small_sweep(methods=[]))


def test_sweep_best_over_inflation():
    result = SweepResult(
        cells=[
            SweepCell(method="esrf", M=5, dtobs=0.05, inflation=0.0, rmse=0.6),
            SweepCell(method="esrf", M=5, dtobs=0.05, inflation=0.1, rmse=0.55),
            SweepCell(method="esrf", M=5, dtobs=0.05, inflation=0.2, error="singular"),
        ]
    )
    assert result.best("esrf", 5, 0.05).inflation == 0.1
    assert result.best("homotopy", 5, 0.05) is None
    assert [c.inflation for c in result.failures] == [0.2]


# ---------------------------------------------------------------------------
# Single windows
# ---------------------------------------------------------------------------


def test_linear_2d_mean_field_window():
    scenario = build_scenario("linear-2d", {"particles": 2000, "scheme": "meanfield"})
    experiment = single_window_experiment(scenario, seed=1)
    stats = experiment.run.final_stats
    assert experiment.oracle is experiment.posterior_oracle
    assert experiment.oracle.mean == pytest.approx(LINEAR_2D_POSTERIOR_MEAN, abs=1e-4)
    assert stats.mean == pytest.approx(LINEAR_2D_POSTERIOR_MEAN, abs=0.05)
    assert stats.cov == pytest.approx(LINEAR_2D_POSTERIOR_COV, rel=0.3)


def test_uncontrolled_window_matches_prior_oracle():
    scenario = build_scenario("linear-2d", {"particles": 2000})
    experiment = single_window_experiment(scenario, seed=1, controls=False)
    stats = experiment.run.final_stats
    assert experiment.oracle is experiment.prior_oracle
    assert stats.mean == pytest.approx(experiment.oracle.mean, abs=0.02)
    assert np.allclose(stats.cov, experiment.oracle.cov, atol=0.01)


def test_double_well_window_diagnostics():
    scenario = build_scenario("double-well", {"particles": 200, "T": 0.01, "R": 1.0})
    experiment = single_window_experiment(scenario, seed=0)
    diagnostics = experiment.diagnostics
    assert experiment.final_ensemble.shape == (200, 2)
    assert np.isfinite(experiment.final_ensemble).all()
    assert 1.0 <= diagnostics["pf_ess"] <= 200.0
    assert diagnostics["importance_mean"].shape == (2,)
    assert diagnostics["esrf_mean"].shape == (2,)
    assert experiment.oracle is None


@pytest.mark.parametrize("name", ["pure-diffusion", "pure-diffusion-printed"])
def test_pure_diffusion_preset_at_full_ensemble(name):
    scenario = build_scenario(name)
    assert scenario.particles == 10_000
    experiment = single_window_experiment(scenario, seed=42)
    stats = experiment.run.final_stats
    assert stats.mean == pytest.approx(experiment.posterior_oracle.mean, abs=0.01)
    assert stats.cov[0, 0] == pytest.approx(experiment.posterior_oracle.cov[0, 0], rel=0.05)


def test_window_snapshots():
    scenario = build_scenario("pure-diffusion", {"particles": 100})
    default = single_window_experiment(scenario, seed=0)
    assert [t for t, _ in default.run.snapshots] == [0.0, 1.0]
    custom = single_window_experiment(scenario, seed=0, snapshot_times=[0.0, 0.25, 0.5, 1.0])
    assert [t for t, _ in custom.run.snapshots] == pytest.approx([0.0, 0.25, 0.5, 1.0])


def test_single_window_rejects_cycled_scenario():
    with pytest.raises(ConfigError, match="cycled"):
        single_window_experiment(build_scenario("lorenz63"))


# ---------------------------------------------------------------------------
# Reproduction runs
# ---------------------------------------------------------------------------


@pytest.mark.slow
@pytest.mark.parametrize("scheme", ["euler", "meanfield"])
def test_linear_2d_posterior_within_monte_carlo_error(scheme):
    """Full ensemble: the posterior mean lies within three standard errors of the Kalman posterior."""
    scenario = build_scenario("linear-2d", {"scheme": scheme})
    assert scenario.corrector
    experiment = single_window_experiment(scenario, seed=0)
    stats = experiment.run.final_stats
    standard_error = np.sqrt(np.diag(LINEAR_2D_POSTERIOR_COV) / scenario.particles)
    assert np.all(np.abs(stats.mean - LINEAR_2D_POSTERIOR_MEAN) <= 3.0 * standard_error)
    assert stats.cov == pytest.approx(LINEAR_2D_POSTERIOR_COV, rel=0.3)


@pytest.mark.slow
def test_double_well_bridging():
    scenario = build_scenario("double-well")
    assert (scenario.scheme, scenario.dt, scenario.particles) == ("meanfield", 1e-4, 1_000)
    experiment = single_window_experiment(scenario, seed=0)
    ens = experiment.final_ensemble
    near_data = np.abs(ens[:, 0] + 1.5) <= 0.45
    assert near_data.mean() >= 0.9
    assert np.mean(np.abs(ens[:, 1] - (2.0 - 0.2 * ens[:, 0] ** 2))) <= 0.2
    assert experiment.diagnostics["pf_ess"] < 0.05 * scenario.particles
    assert experiment.diagnostics["importance_mean"][0] == pytest.approx(-1.5, abs=0.1)


@pytest.mark.slow
def test_lorenz63_table_cells():
    """Best-over-inflation RMSEs of two grid cells, 2000 cycles."""
    config = SweepConfig(ensembles=[5], dtobs_values=[0.05], cycles=2000, workers=4)
    short = sweep(config)
    assert short.best("esrf", 5, 0.05).rmse == pytest.approx(0.5712, abs=0.12)
    assert short.best("homotopy", 5, 0.05).rmse == pytest.approx(0.5457, abs=0.12)

    config = SweepConfig(ensembles=[15], dtobs_values=[0.12], cycles=2000, workers=4)
    long = sweep(config)
    esrf, homotopy = long.best("esrf", 15, 0.12).rmse, long.best("homotopy", 15, 0.12).rmse
    assert esrf == pytest.approx(0.9375, abs=0.12)
    assert homotopy == pytest.approx(0.8615, abs=0.12)
    assert homotopy < esrf
