"""Tests for report writers and configuration files."""

import csv

import numpy as np
import pytest

from bridgeflow.ensemble import EnsembleStats
from bridgeflow.errors import ConfigError
from bridgeflow.experiments import CycleResult, SweepResult, build_scenario, single_window_experiment
from bridgeflow.models import RunConfig, SweepCell
from bridgeflow.reports import (
    SCHEMA_LINE,
    build_config,
    cycle_summary,
    fmt,
    format_table1,
    load_config,
    moments_header,
    read_config_file,
    window_summary,
    write_config,
    write_failures,
    write_moments_csv,
    write_particles_csv,
    write_plot_script,
    write_rmse_csv,
    write_summary,
)


def _read_rows(path):
    lines = path.read_text(encoding="utf-8").splitlines()
    assert lines[0] == SCHEMA_LINE
    return list(csv.reader(lines[1:]))


def test_fmt_reads_back_exactly():
    for value in (0.1, 1.0 / 3.0, 2.5e-17, -123456.789):
        assert float(fmt(value)) == value


def test_moments_header():
    assert moments_header(2) == ["t", "mean_0", "mean_1", "cov_0_0", "cov_0_1", "cov_1_1"]


def test_write_moments_csv(tmp_path):
    stats = EnsembleStats(mean=np.array([1.0 / 3.0, 2.0]), cov=np.array([[0.5, 0.1], [0.1, 0.25]]))
    rows = _read_rows(write_moments_csv(tmp_path / "moments.csv", [(0.0, stats), (1.0, stats)]))
    assert rows[0] == moments_header(2)
    assert len(rows) == 3
    assert [float(v) for v in rows[2]] == [1.0, 1.0 / 3.0, 2.0, 0.5, 0.1, 0.25]


def test_write_moments_csv_needs_rows(tmp_path):
    with pytest.raises(ValueError, match="no moments"):
        write_moments_csv(tmp_path / "moments.csv", [])


def test_write_particles_csv(tmp_path):
    ens = np.arange(6.0).reshape(3, 2)
    rows = _read_rows(write_particles_csv(tmp_path / "particles.csv", [(0.0, ens), (1.0, ens + 1)]))
    assert rows[0] == ["t", "particle", "x_0", "x_1"]
    assert len(rows) == 7
    assert rows[1] == ["0", "0", "0", "1"]
    assert rows[-1] == ["1", "2", "5", "6"]


def test_write_rmse_csv_marks_failures(tmp_path):
    cells = [
        SweepCell(method="esrf", M=5, dtobs=0.05, inflation=0.0, rmse=0.5),
        SweepCell(method="homotopy", M=5, dtobs=0.05, inflation=0.0, error="singular"),
    ]
    rows = _read_rows(write_rmse_csv(tmp_path / "rmse.csv", cells))
    assert rows[0] == ["method", "M", "dtobs", "inflation", "rmse"]
    assert rows[1][0] == "esrf"
    assert float(rows[1][4]) == 0.5
    assert rows[2][4] == ""


def test_write_failures(tmp_path):
    ok = SweepCell(method="esrf", M=5, dtobs=0.05, inflation=0.0, rmse=0.5)
    assert write_failures(tmp_path / "failures.txt", [ok]) is None
    bad = SweepCell(method="homotopy", M=10, dtobs=0.1, inflation=0.025, error="cycle 7: singular")
    path = write_failures(tmp_path / "failures.txt", [ok, bad])
    assert path.read_text() == "homotopy M=10 dtobs=0.1 inflation=0.025: cycle 7: singular\n"


def test_format_table1_pairs_and_gaps():
    result = SweepResult(
        cells=[
            SweepCell(method="esrf", M=5, dtobs=0.05, inflation=0.0, rmse=0.5712),
            SweepCell(method="homotopy", M=5, dtobs=0.05, inflation=0.1, rmse=0.5457),
        ]
    )
    lines = format_table1(result, [5, 10], [0.05]).splitlines()
    assert lines[0] == "dtobs   " + "M=5".rjust(15) + "M=10".rjust(15)
    assert lines[1] == "0.05    " + "0.5712/0.5457".rjust(15) + "-/-".rjust(15)


def test_window_summary_reports_oracle():
    experiment = single_window_experiment(build_scenario("pure-diffusion", {"particles": 100}), seed=0)
    summary = window_summary(experiment)
    assert summary["scenario"] == "pure-diffusion"
    assert summary["controls"] == "on"
    assert summary["steps"] == "200"
    assert summary["oracle_mean"].startswith("[0.99667")
    assert "pf_ess" not in summary


def test_cycle_summary():
    result = CycleResult(method="esrf", rmse=0.25, means=np.zeros((40, 3)))
    summary = cycle_summary("lorenz63", result, 10, 0.05, 0.1)
    assert summary["cycles"] == "40"
    assert float(summary["rmse"]) == 0.25


def test_write_summary(tmp_path):
    path = write_summary(tmp_path / "summary.txt", {"scenario": "lorenz63", "rmse": "0.5"})
    assert path.read_text() == "scenario: lorenz63\nrmse: 0.5\n"


def test_plot_script_columns(tmp_path):
    text = write_plot_script(tmp_path / "plot.gp", 2, particles=True).read_text()
    for column in ("1:2", "1:3", "1:4", "1:6"):
        assert f"using {column} " in text
    assert "using 1:5 " not in text
    assert "particles.png" in text


def test_plot_script_scalar_has_no_cloud(tmp_path):
    text = write_plot_script(tmp_path / "plot.gp", 1, particles=True).read_text()
    assert "moments.png" in text
    assert "particles.png" not in text


def test_config_round_trip(tmp_path):
    config = RunConfig(scenario="linear-2d", particles=500, snapshot_times=[0.0, 0.5], out=str(tmp_path))
    path = write_config(tmp_path / "config.yaml", config)
    assert load_config(path, RunConfig) == config


def test_config_file_must_be_flat(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("scenario: linear-2d\noverrides:\n  R: 0.1\n")
    with pytest.raises(ConfigError, match="flat"):
        read_config_file(path)


def test_config_file_must_be_mapping(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("- linear-2d\n- lorenz63\n")
    with pytest.raises(ConfigError, match="mapping"):
        read_config_file(path)


def test_empty_config_file(tmp_path):
    path = tmp_path / "config.yaml"
    path.write_text("")
    assert read_config_file(path) == {}


def test_missing_config_file(tmp_path):
    with pytest.raises(ConfigError, match="cannot read"):
        read_config_file(tmp_path / "absent.yaml")


def test_build_config_later_layers_win():
    config = build_config(RunConfig, {"seed": 1, "out": "a"}, {"seed": 2, "out": None})
    assert config.seed == 2
    assert config.out == "a"


@pytest.mark.parametrize("layer", [{"particles": 1}, {"ensemble": 10}, {"method": "enkf"}])
def test_build_config_rejects_invalid_values(layer):
    with pytest.raises(ConfigError, match="invalid configuration"):
        build_config(RunConfig, layer)
