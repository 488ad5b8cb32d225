"""bridgeflow command-line interface.

Entry point: ``bridgeflow`` (see ``[project.scripts]`` in pyproject.toml).

Subcommands
-----------
scenario
    Run one preset.  Single-window presets (``pure-diffusion``,
    ``pure-diffusion-printed``, ``scalar-linear``, ``linear-2d``,
    ``double-well``) write the ensemble moments at every step, particle
    snapshots and a summary comparing the final ensemble with the available
    oracle.  The cycled ``lorenz63`` preset runs a twin experiment and
    reports the RMSE of the posterior means.

sweep
    Run a (method, M, dtobs, inflation) grid of Lorenz-63 twin experiments
    and write ``rmse.csv`` plus ``table1.txt`` with the best RMSE over the
    inflation factors as ``esrf/homotopy`` pairs.  ``--full`` uses 20000
    cycles.  Ctrl-C writes the cells finished so far.

validate
    Run the self-check suite and print ``PASS``/``FAIL`` per check.

Settings are resolved as defaults < ``--config FILE`` (flat YAML) <
command-line flags.  The output directory defaults to
``$BRIDGEFLOW_OUT_DIR`` or ``./bridgeflow-out``.

Exit codes: 0 ok, 1 configuration error, 2 numerical failure, 3 failed
validation, 130 interrupted.
"""

from __future__ import annotations

import argparse
import logging
import sys
from os import environ
from pathlib import Path
from typing import Any

import numpy as np

from bridgeflow import __version__
from bridgeflow.errors import ConfigError, NumericalError
from bridgeflow.experiments import (
    SCENARIOS,
    SweepResult,
    build_scenario,
    generate_truth_and_obs,
    run_assimilation_cycles,
    single_window_experiment,
    sweep,
    sweep_grid,
)
from bridgeflow.models import RunConfig, SweepCell, SweepConfig
from bridgeflow.reports import (
    build_config,
    cycle_summary,
    read_config_file,
    window_summary,
    write_config,
    write_failures,
    write_moments_csv,
    write_particles_csv,
    write_plot_script,
    write_rmse_csv,
    write_summary,
    write_table1,
)
from bridgeflow.validation import run_validation

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_VALIDATION = 3
EXIT_INTERRUPTED = 130

#: Cycle count of ``sweep --full``.
FULL_CYCLES = 20_000


def _default_out() -> str:
    return environ.get("BRIDGEFLOW_OUT_DIR", "bridgeflow-out")


def _layers(args: argparse.Namespace, flags: dict[str, Any]) -> list[dict[str, Any]]:
    file_layer = read_config_file(Path(args.config)) if args.config else {}
    return [{"out": _default_out()}, file_layer, flags]


# ---------------------------------------------------------------------------
# scenario
# ---------------------------------------------------------------------------


def _resolve_run_config(args: argparse.Namespace) -> RunConfig:
    if args.scenario_name and args.scenario and args.scenario_name != args.scenario:
        raise ConfigError(f"conflicting scenario names {args.scenario_name!r} and {args.scenario!r}")
    flags = {
        "scenario": args.scenario_name or args.scenario,
        "method": args.method,
        "particles": args.particles,
        "dt": args.dt,
        "window": args.window,
        "dtobs": args.dtobs,
        "cycles": args.cycles,
        "inflation": args.inflation,
        "seed": args.seed,
        "scheme": args.scheme,
        "corrector": True if args.corrector else None,
        "controls": False if args.no_controls else None,
        "snapshot_times": args.snapshot_times,
        "write_particles": False if args.no_particles else None,
        "emit_plot_script": True if args.emit_plot_script else None,
        "out": args.out,
    }
    return build_config(RunConfig, *_layers(args, flags))


def _cmd_scenario(config: RunConfig) -> int:
    """Run one scenario and write its reports.  Returns an exit code."""
    overrides = {
        "particles": config.particles,
        "dt": config.dt,
        "T": config.window,
        "dtobs": config.dtobs,
        "cycles": config.cycles,
        "inflation": config.inflation,
        "scheme": config.scheme,
        "corrector": config.corrector,
    }
    scenario = build_scenario(config.scenario, overrides)
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    if scenario.cycled:
        twin = generate_truth_and_obs(scenario, scenario.cycles, config.seed)
        result = run_assimilation_cycles(twin, scenario, config.method, seed=config.seed, controls=config.controls)
        summary = cycle_summary(scenario.name, result, scenario.particles, twin.dtobs, scenario.inflation)
        written.append(write_moments_csv(out / "moments.csv", result.moments))
    else:
        if config.method != "homotopy":
            raise ConfigError(f"method {config.method!r} applies to cycled scenarios only")
        experiment = single_window_experiment(
            scenario, seed=config.seed, controls=config.controls, snapshot_times=config.snapshot_times
        )
        summary = window_summary(experiment)
        written.append(write_moments_csv(out / "moments.csv", experiment.run.moments()))
        if config.write_particles and experiment.run.snapshots:
            written.append(write_particles_csv(out / "particles.csv", experiment.run.snapshots))

    written.append(write_summary(out / "summary.txt", summary))
    written.append(write_config(out / "config.yaml", config))
    if config.emit_plot_script:
        particles = (out / "particles.csv") in written
        written.append(write_plot_script(out / "plot.gp", scenario.dim, particles=particles))

    for key, value in summary.items():
        print(f"{key}: {value}")
    for path in written:
        print(f"Wrote {path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _resolve_sweep_config(args: argparse.Namespace) -> SweepConfig:
    flags = {
        "scenario": args.scenario,
        "methods": args.methods,
        "ensembles": args.ensembles,
        "dtobs_values": args.dtobs,
        "inflations": args.inflations,
        "cycles": args.cycles if args.cycles is not None else (FULL_CYCLES if args.full else None),
        "dt": args.dt,
        "seed": args.seed,
        "workers": args.workers,
        "out": args.out,
    }
    return build_config(SweepConfig, *_layers(args, flags))


def _write_sweep(out: Path, config: SweepConfig, cells: list[SweepCell]) -> list[Path]:
    result = SweepResult(cells=cells)
    written = [
        write_rmse_csv(out / "rmse.csv", cells),
        write_table1(out / "table1.txt", result, config.ensembles, config.dtobs_values),
        write_config(out / "config.yaml", config),
    ]
    failures = write_failures(out / "failures.txt", cells)
    if failures:
        written.append(failures)
    return written


def _cmd_sweep(config: SweepConfig) -> int:
    """Run the sweep grid, flushing what finished if interrupted.  Returns an exit code."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    finished: list[SweepCell] = []
    try:
        result = sweep(config, on_cell=finished.append)
    except KeyboardInterrupt:
        order = {key: n for n, key in enumerate(sweep_grid(config))}
        finished.sort(key=lambda c: order[(c.method, c.M, c.dtobs, c.inflation)])
        for path in _write_sweep(out, config, finished):
            print(f"Wrote {path} (partial)")
        print(f"Interrupted after {len(finished)} cells", file=sys.stderr)
        return EXIT_INTERRUPTED

    for path in _write_sweep(out, config, result.cells):
        print(f"Wrote {path}")
    print((out / "table1.txt").read_text(encoding="utf-8"), end="")
    if result.failures:
        print(f"{len(result.failures)} of {len(result.cells)} cells failed; see failures.txt", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _cmd_validate(seed: int, fault_scale: float) -> int:
    """Run the self-checks.  Returns 3 if any check fails."""
    results = run_validation(seed=seed, fault_scale=fault_scale)
    for result in results:
        print(f"{'PASS' if result.passed else 'FAIL'} {result.name}: {result.detail}")
    failed = [r for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} of {len(results)} checks failed", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"All {len(results)} checks passed.")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parser
# ---------------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridgeflow",
        description="Homotopy-controlled interacting particle systems for data assimilation",
    )
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="Log progress (-v) or every step (-vv) to stderr"
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    # Flags default to None so that only explicitly given ones override the config file.
    sc = sub.add_parser(
        "scenario",
        help="Run one scenario preset and write moments, particles and a summary",
        description=f"Run a scenario preset.  Presets: {', '.join(SCENARIOS)}.",
    )
    sc.add_argument("scenario_name", nargs="?", metavar="SCENARIO", help="Scenario preset name")
    sc.add_argument("--scenario", default=None, help="Scenario preset name (alternative to the positional)")
    sc.add_argument("--method", choices=["homotopy", "esrf"], default=None, help="Filter for cycled scenarios")
    sc.add_argument("--particles", "--ensemble", dest="particles", type=int, default=None, metavar="M")
    sc.add_argument("--dt", type=float, default=None, help="Integrator step")
    sc.add_argument("--window", type=float, default=None, metavar="T", help="Window length of single-window presets")
    sc.add_argument("--dtobs", type=float, default=None, help="Observation interval of cycled presets")
    sc.add_argument("--cycles", type=int, default=None, metavar="N", help="Number of assimilation cycles")
    sc.add_argument("--inflation", type=float, default=None, help="Multiplicative inflation factor")
    sc.add_argument("--seed", type=int, default=None)
    sc.add_argument("--scheme", choices=["euler", "robust", "meanfield"], default=None)
    sc.add_argument("--corrector", action="store_true", help="Heun predictor-corrector on each step")
    sc.add_argument("--no-controls", action="store_true", help="Run the uncontrolled prior flow")
    sc.add_argument(
        "--snapshot-times", type=float, nargs="+", default=None, metavar="T", help="Particle snapshot times"
    )
    sc.add_argument("--no-particles", action="store_true", help="Do not write particles.csv")
    sc.add_argument("--emit-plot-script", action="store_true", help="Write a gnuplot script next to the CSVs")
    sc.add_argument("--out", default=None, metavar="DIR", help="Output directory")
    sc.add_argument("--config", default=None, metavar="FILE", help="Flat YAML configuration file")

    sw = sub.add_parser(
        "sweep",
        help="RMSE grid of Lorenz-63 twin experiments",
        description=(
            "Run every (method, M, dtobs, inflation) combination and write rmse.csv and table1.txt.\n"
            "Defaults: both methods, M in 5 10 15, dtobs in 0.05 0.1 0.12, inflation 0.025k for k = 0..9,\n"
            "2000 cycles (20000 with --full)."
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sw.add_argument("--scenario", default=None)
    sw.add_argument("--methods", nargs="+", choices=["homotopy", "esrf"], default=None)
    sw.add_argument("--ensembles", nargs="+", type=int, default=None, metavar="M")
    sw.add_argument("--dtobs", nargs="+", type=float, default=None)
    sw.add_argument("--inflations", nargs="+", type=float, default=None)
    sw.add_argument("--cycles", type=int, default=None, metavar="N")
    sw.add_argument("--full", action="store_true", help=f"Use {FULL_CYCLES} cycles")
    sw.add_argument("--dt", type=float, default=None)
    sw.add_argument("--seed", type=int, default=None)
    sw.add_argument("--workers", type=int, default=None, help="Worker processes (default: 1)")
    sw.add_argument("--out", default=None, metavar="DIR")
    sw.add_argument("--config", default=None, metavar="FILE")

    va = sub.add_parser("validate", help="Run the self-check suite")
    va.add_argument("--seed", type=int, default=0)
    va.add_argument(
        "--fault-scale",
        type=float,
        default=1.0,
        help="Scale the data-driven control of the moment check (anything far from 1 must fail)",
    )
    return parser


def _configure_logging(verbosity: int) -> None:
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")


def main() -> None:
    """Entry point for the ``bridgeflow`` CLI."""
    parser = _build_parser()
    args = parser.parse_args()

    if args.command is None:
        parser.print_help()
        sys.exit(0)

    _configure_logging(args.verbose)
    try:
        if args.command == "scenario":
            rc = _cmd_scenario(_resolve_run_config(args))
        elif args.command == "sweep":
            rc = _cmd_sweep(_resolve_sweep_config(args))
        else:
            rc = _cmd_validate(args.seed, args.fault_scale)
    except ConfigError as exc:
        print(f"Error: {exc}", file=sys.stderr)
        rc = EXIT_CONFIG
    except (NumericalError, np.linalg.LinAlgError) as exc:
        print(f"Numerical failure: {exc}", file=sys.stderr)
        rc = EXIT_NUMERICAL
    except KeyboardInterrupt:
        print("Interrupted", file=sys.stderr)
        rc = EXIT_INTERRUPTED
    sys.exit(rc)
