"""CSV, text and gnuplot emitters.

Every CSV starts with a ``# schema=1`` comment line followed by a header
row.  Floats are written with 17 significant digits so values read back
bit-identical.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Iterable, Mapping, Sequence
from pathlib import Path
from typing import Any, TypeVar

import numpy as np
import yaml
from pydantic import BaseModel, ValidationError

from bridgeflow.ensemble import Ensemble, EnsembleStats
from bridgeflow.errors import ConfigError
from bridgeflow.experiments import CycleResult, SweepResult, WindowExperiment
from bridgeflow.models import SweepCell

logger = logging.getLogger(__name__)

#: First line of every CSV file.
SCHEMA_LINE = "# schema=1"

ModelT = TypeVar("ModelT", bound=BaseModel)


def fmt(value: float) -> str:
    return format(float(value), ".17g")


def _fmt_vector(values: Iterable[float]) -> str:
    return "[" + ", ".join(fmt(v) for v in np.ravel(values)) + "]"


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence[str]]) -> Path:
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(SCHEMA_LINE + "\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    logger.info("wrote %s", path)
    return path


def moments_header(dim: int) -> list[str]:
    cov = [f"cov_{i}_{j}" for i in range(dim) for j in range(i, dim)]
    return ["t", *(f"mean_{i}" for i in range(dim)), *cov]


def write_moments_csv(path: Path, moments: Sequence[tuple[float, EnsembleStats]]) -> Path:
    """One row per time: ``t``, the mean, and the upper triangle of the covariance."""
    if not moments:
        raise ValueError("no moments to write")
    dim = moments[0][1].dim
    upper = np.triu_indices(dim)
    rows = ([fmt(t), *map(fmt, stats.mean), *map(fmt, stats.cov[upper])] for t, stats in moments)
    return _write_csv(path, moments_header(dim), rows)


def write_particles_csv(path: Path, snapshots: Sequence[tuple[float, Ensemble]]) -> Path:
    if not snapshots:
        raise ValueError("no particle snapshots to write")
    dim = snapshots[0][1].shape[1]
    header = ["t", "particle", *(f"x_{i}" for i in range(dim))]
    rows = ([fmt(t), str(i), *map(fmt, x)] for t, ens in snapshots for i, x in enumerate(ens))
    return _write_csv(path, header, rows)


def write_rmse_csv(path: Path, cells: Sequence[SweepCell]) -> Path:
    """Sweep results in grid order; failed cells carry an empty rmse."""
    rows = (
        [c.method, str(c.M), fmt(c.dtobs), fmt(c.inflation), "" if c.rmse is None else fmt(c.rmse)] for c in cells
    )
    return _write_csv(path, ["method", "M", "dtobs", "inflation", "rmse"], rows)


def write_failures(path: Path, cells: Sequence[SweepCell]) -> Path | None:
    failed = [c for c in cells if c.rmse is None]
    if not failed:
        return None
    lines = [f"{c.method} M={c.M} dtobs={c.dtobs:g} inflation={c.inflation:g}: {c.error}" for c in failed]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def format_table1(result: SweepResult, ensembles: Sequence[int], dtobs_values: Sequence[float]) -> str:
    """Best-over-inflation RMSE as ``esrf/homotopy`` pairs; rows Δt_obs, columns M."""
    width = 15
    lines = ["dtobs".ljust(8) + "".join(f"M={m}".rjust(width) for m in ensembles)]
    for dtobs in dtobs_values:
        cells = []
        for m in ensembles:
            pair = [result.best(method, m, dtobs) for method in ("esrf", "homotopy")]
            cells.append("/".join("-" if c is None else f"{c.rmse:.4f}" for c in pair))
        lines.append(f"{dtobs:<8g}" + "".join(c.rjust(width) for c in cells))
    return "\n".join(lines) + "\n"


def write_table1(path: Path, result: SweepResult, ensembles: Sequence[int], dtobs_values: Sequence[float]) -> Path:
    path.write_text(format_table1(result, ensembles, dtobs_values), encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def window_summary(experiment: WindowExperiment) -> dict[str, str]:
    """``key: value`` pairs describing a single-window run."""
    final = experiment.run.final_stats
    summary = {
        "scenario": experiment.scenario.name,
        "controls": "on" if experiment.controls else "off",
        "particles": str(experiment.final_ensemble.shape[0]),
        "steps": str(len(experiment.run.reports)),
        "final_mean": _fmt_vector(final.mean),
        "final_cov": _fmt_vector(final.cov),
    }
    oracle = experiment.oracle
    if oracle is not None:
        summary["oracle_mean"] = _fmt_vector(oracle.mean)
        summary["oracle_cov"] = _fmt_vector(oracle.cov)
        summary["max_abs_mean_error"] = fmt(np.max(np.abs(final.mean - oracle.mean)))
        summary["max_abs_cov_error"] = fmt(np.max(np.abs(final.cov - oracle.cov)))
    diagnostics = experiment.diagnostics
    if "pf_ess" in diagnostics:
        summary["pf_ess"] = fmt(diagnostics["pf_ess"])
        summary["importance_mean"] = _fmt_vector(diagnostics["importance_mean"])
        summary["esrf_mean"] = _fmt_vector(diagnostics["esrf_mean"])
    return summary


def cycle_summary(scenario: str, result: CycleResult, particles: int, dtobs: float, inflation: float) -> dict[str, str]:
    return {
        "scenario": scenario,
        "method": result.method,
        "particles": str(particles),
        "cycles": str(result.means.shape[0]),
        "dtobs": fmt(dtobs),
        "inflation": fmt(inflation),
        "rmse": fmt(result.rmse),
    }


def write_summary(path: Path, summary: Mapping[str, str]) -> Path:
    path.write_text("".join(f"{key}: {value}\n" for key, value in summary.items()), encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def write_plot_script(path: Path, dim: int, *, particles: bool = False) -> Path:
    """gnuplot script plotting the moment trajectories (and the final particle cloud for 2-D states)."""
    mean_plots = ", \\\n     ".join(
        f"'moments.csv' using 1:{2 + i} with lines title 'mean_{i}'" for i in range(dim)
    )
    var_cols = [1 + dim + 1 + sum(dim - k for k in range(i)) for i in range(dim)]
    var_plots = ", \\\n     ".join(
        f"'moments.csv' using 1:{col} with lines title 'cov_{i}_{i}'" for i, col in enumerate(var_cols)
    )
    lines = [
        "# generated by bridgeflow",
        "set datafile separator ','",
        "set datafile commentschars '#'",
        "set key autotitle columnhead",
        "set terminal pngcairo size 900,600",
        "set output 'moments.png'",
        "set multiplot layout 2,1",
        "set xlabel 't'",
        f"plot {mean_plots}",
        f"plot {var_plots}",
        "unset multiplot",
    ]
    if particles and dim >= 2:
        lines += [
            "set output 'particles.png'",
            "set xlabel 'x_0'",
            "set ylabel 'x_1'",
            "plot 'particles.csv' using 3:4 with dots title 'particles'",
        ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    logger.info("wrote %s", path)
    return path


def write_config(path: Path, config: BaseModel) -> Path:
    """Dump the resolved configuration; :func:`load_config` reads it back unchanged."""
    path.write_text(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=True), encoding="utf-8")
    return path


def read_config_file(path: Path) -> dict[str, Any]:
    """Read a flat YAML mapping of configuration keys."""
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must be a mapping of key: value lines")
    nested = sorted(k for k, v in data.items() if isinstance(v, dict))
    if nested:
        raise ConfigError(f"config file {path} must be flat; nested values for: {', '.join(nested)}")
    return data


def build_config(model: type[ModelT], *layers: Mapping[str, Any]) -> ModelT:
    """Merge *layers* (later wins, ``None`` values skipped) and validate them as *model*."""
    merged: dict[str, Any] = {}
    for layer in layers:
        merged.update({k: v for k, v in layer.items() if v is not None})
    try:
        return model.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from exc


def load_config(path: Path, model: type[ModelT]) -> ModelT:
    return build_config(model, read_config_file(path))
