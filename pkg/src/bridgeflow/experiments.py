"""Scenario presets, twin experiments, assimilation cycles and sweeps.

Presets
-------
pure-diffusion
    Scalar pure diffusion, ``R = 0.01, σ = 1, H = 1, y = 1, T = 1``, prior
    ``N(0, 1)``.  The prior at ``T`` has variance ``Σ₀ + 2σT = 3``.
pure-diffusion-printed
    The same with ``σ = 1/2`` and ``R = 0.1``: prior variance 2 at ``T`` and
    Kalman gain ``2/2.1 ≈ 0.9524``, which are the posterior values usually
    quoted for this example.  Both pure-diffusion presets step the
    mean-field ODE: the Euler-Maruyama variance error pushes the ensemble
    past the unstable branch of the variance equation once ``t`` nears ``T``.
scalar-linear
    Scalar linear drift ``f(x) = λx`` (``λ = 1`` unless overridden).
linear-2d
    ``F = [[-2, 1], [1, -2]]``, ``σ = 0.1``, ``H = (1 0)``, ``R = 0.01``,
    ``y = 2.5``, prior ``N((1, 3), 0.02 I)``.  Euler-Maruyama with the Heun
    corrector.
double-well
    Gradient flow of a double well slaved to a parabola, ``σ = 1``, first
    component observed with ``R = 0.01`` at ``y = -1.5``.  Mean-field ODE at
    ``dt = 1e-4``; the uncontrolled reference run uses Euler-Maruyama.
lorenz63
    Cycled twin experiment with the Lorenz-63 model observed in its first
    component every ``dtobs`` with unit noise.
"""

from __future__ import annotations

import dataclasses
import functools
import logging
import math
import multiprocessing
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from bridgeflow.baselines import (
    bootstrap_pf_diagnostics,
    esrf_analysis,
    gaussian_moment_propagation,
    kalman_analysis,
    rmse,
)
from bridgeflow.dynamics import (
    DoubleWellDrift,
    DriftModel,
    LinearDrift,
    Lorenz63Drift,
    ObservationModel,
    ZeroDrift,
)
from bridgeflow.ensemble import (
    Ensemble,
    EnsembleStats,
    GaussianBelief,
    ensemble_mean,
    ensemble_stats,
    weighted_moments,
)
from bridgeflow.errors import ConfigError, NumericalError
from bridgeflow.integrators import RngStream, WindowRun, mean_field_ode_step, propagate_window, window_schedule
from bridgeflow.models import AssimilationConfig, SweepCell, SweepConfig

logger = logging.getLogger(__name__)

#: Stream ids below this value are assimilation cycles / windows.
_INIT_STREAM = 1 << 40
_OBS_STREAM = _INIT_STREAM + 1
_PRIOR_STREAM = _INIT_STREAM + 2

#: Below this ensemble size the double-well runs become unstable.
DOUBLE_WELL_MIN_PARTICLES = 100

#: Reference Lorenz-63 initial condition.
LORENZ63_TRUTH0 = (-0.587276, -0.563678, 16.8708)


@dataclass(frozen=True)
class Scenario:
    """A fully specified experiment: models, numerical settings and initial condition."""

    name: str
    drift: DriftModel
    obs: ObservationModel
    sigma: float
    T: float
    dt: float
    particles: int
    law: str = "generic"
    scheme: str = "euler"
    corrector: bool = False
    gradient: str = "analytic"
    #: Gaussian prior of single-window scenarios.
    prior: GaussianBelief | None = None
    #: ``x₁ ~ N(mean, var)`` with ``x₂ = 2 - βx₁²`` (double-well initial condition).
    parabola: tuple[float, float, float] | None = None
    #: Cycled scenarios: observation interval, cycle count, inflation, truth start, initial spread.
    dtobs: float | None = None
    cycles: int = 0
    inflation: float = 0.0
    truth0: tuple[float, ...] | None = None
    init_spread: float = 0.0

    @property
    def dim(self) -> int:
        return self.drift.dim

    @property
    def cycled(self) -> bool:
        return self.dtobs is not None

    @property
    def linear_gaussian(self) -> bool:
        return self.drift.is_linear and self.prior is not None

    @property
    def _prior_scheme(self) -> str:
        # a Gaussian score only stands in for the diffusion when the prior flow stays Gaussian
        return "meanfield" if self.scheme == "meanfield" and self.linear_gaussian else "euler"

    def assimilation_config(self, seed: int, *, controls: bool = True, **updates: Any) -> AssimilationConfig:
        settings = {
            "T": self.dtobs if self.cycled else self.T,
            "dt": self.dt,
            "sigma": self.sigma,
            "inflation": self.inflation,
            "seed": seed,
            "scheme": self.scheme if controls else self._prior_scheme,
            "corrector": self.corrector,
            "law": self.law if controls else "none",
            "gradient": self.gradient,
        }
        settings.update(updates)
        return AssimilationConfig(**settings)

    def sample_prior(self, particles: int, seed: int) -> Ensemble:
        """Initial ensemble of a single window."""
        rng = RngStream(seed, _INIT_STREAM).generator()
        if self.parabola is not None:
            mean, var, beta = self.parabola
            x1 = mean + math.sqrt(var) * rng.standard_normal(particles)
            return np.column_stack([x1, 2.0 - beta * x1**2])
        if self.prior is None:
            raise ConfigError(f"scenario {self.name!r} has no prior to sample from")
        return self.prior.sample(particles, rng)


def _scalar_obs(R: float, y: float, dim: int = 1) -> ObservationModel:
    H = np.zeros((1, dim))
    H[0, 0] = 1.0
    return ObservationModel(H=H, R=np.array([[R]]), y=np.array([y]))


def _pure_diffusion(sigma: float = 1.0, R: float = 0.01, name: str = "pure-diffusion") -> Scenario:
    return Scenario(
        name=name,
        drift=ZeroDrift(1),
        obs=_scalar_obs(R, 1.0),
        sigma=sigma,
        T=1.0,
        dt=0.005,
        particles=10_000,
        law="pure-diffusion",
        scheme="meanfield",
        prior=GaussianBelief(mean=np.zeros(1), cov=np.eye(1)),
    )


def _scalar_linear() -> Scenario:
    return Scenario(
        name="scalar-linear",
        drift=LinearDrift([[1.0]]),
        obs=_scalar_obs(0.01, 1.0),
        sigma=1.0,
        T=1.0,
        dt=0.001,
        particles=2_000,
        law="linear-gaussian",
        scheme="meanfield",
        prior=GaussianBelief(mean=np.zeros(1), cov=np.eye(1)),
    )


def _linear_2d() -> Scenario:
    return Scenario(
        name="linear-2d",
        drift=LinearDrift([[-2.0, 1.0], [1.0, -2.0]], [0.0, 0.0]),
        obs=_scalar_obs(0.01, 2.5, dim=2),
        sigma=0.1,
        T=1.0,
        dt=0.001,
        particles=10_000,
        corrector=True,
        prior=GaussianBelief(mean=np.array([1.0, 3.0]), cov=0.02 * np.eye(2)),
    )


def _double_well() -> Scenario:
    return Scenario(
        name="double-well",
        drift=DoubleWellDrift(lambda1=2000.0, lambda2=5.0, beta=0.2),
        obs=_scalar_obs(0.01, -1.5, dim=2),
        sigma=1.0,
        T=1.0,
        dt=1e-4,
        particles=1_000,
        parabola=(1.5, 0.0625, 0.2),
        scheme="meanfield",
    )


def _lorenz63() -> Scenario:
    return Scenario(
        name="lorenz63",
        drift=Lorenz63Drift(10.0, 28.0, 8.0 / 3.0),
        obs=_scalar_obs(1.0, 0.0, dim=3),
        sigma=0.0,
        T=0.05,
        dt=0.005,
        particles=10,
        law="pure-drift",
        dtobs=0.05,
        cycles=2000,
        inflation=0.05,
        truth0=LORENZ63_TRUTH0,
        init_spread=0.01,
    )


SCENARIOS: dict[str, Callable[[], Scenario]] = {
    "pure-diffusion": _pure_diffusion,
    "pure-diffusion-printed": functools.partial(_pure_diffusion, sigma=0.5, R=0.1, name="pure-diffusion-printed"),
    "scalar-linear": _scalar_linear,
    "linear-2d": _linear_2d,
    "double-well": _double_well,
    "lorenz63": _lorenz63,
}

#: Overrides that map directly onto :class:`Scenario` fields.
_FIELD_OVERRIDES = {
    "sigma": float,
    "T": float,
    "dt": float,
    "particles": int,
    "law": str,
    "scheme": str,
    "corrector": bool,
    "gradient": str,
    "dtobs": float,
    "cycles": int,
    "inflation": float,
    "init_spread": float,
}
#: Overrides that rebuild a model.
_MODEL_OVERRIDES = ("R", "y", "lambda")


def build_scenario(name: str, overrides: Mapping[str, Any] | None = None) -> Scenario:
    """Build a preset and apply *overrides* (any ``Scenario`` field plus ``R``, ``y``, ``lambda``)."""
    try:
        scenario = SCENARIOS[name]()
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; valid names: {', '.join(SCENARIOS)}") from None

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    unknown = set(overrides) - set(_FIELD_OVERRIDES) - set(_MODEL_OVERRIDES)
    if unknown:
        valid = ", ".join(sorted([*_FIELD_OVERRIDES, *_MODEL_OVERRIDES]))
        raise ConfigError(f"unknown override(s) {', '.join(sorted(unknown))}; valid keys: {valid}")

    updates: dict[str, Any] = {key: cast(overrides[key]) for key, cast in _FIELD_OVERRIDES.items() if key in overrides}
    obs = scenario.obs
    try:
        if "R" in overrides:
            obs = ObservationModel(H=obs.H, R=np.atleast_2d(np.asarray(overrides["R"], dtype=float)), y=obs.y)
        if "y" in overrides:
            obs = obs.with_observation(np.atleast_1d(np.asarray(overrides["y"], dtype=float)))
    except ValueError as exc:
        raise ConfigError(f"invalid observation override for {name}: {exc}") from exc
    updates["obs"] = obs
    if "lambda" in overrides:
        if name != "scalar-linear":
            raise ConfigError("the lambda override applies to the scalar-linear scenario only")
        updates["drift"] = LinearDrift([[float(overrides["lambda"])]])
    if updates.get("scheme") == "robust" and "corrector" not in updates:
        updates["corrector"] = False
    if "dtobs" in updates:
        if not scenario.cycled:
            raise ConfigError(f"scenario {name!r} is a single window; dtobs does not apply")
        updates["T"] = updates["dtobs"]

    scenario = dataclasses.replace(scenario, **updates)
    if scenario.name == "double-well" and scenario.particles < DOUBLE_WELL_MIN_PARTICLES:
        logger.warning(
            "double-well with %d particles; ensembles below %d tend to be numerically unstable",
            scenario.particles,
            DOUBLE_WELL_MIN_PARTICLES,
        )
    logger.info("built scenario %s (%r, M=%d, dt=%g)", scenario.name, scenario.drift, scenario.particles, scenario.dt)
    return scenario


# ---------------------------------------------------------------------------
# Twin experiments and assimilation cycles
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TwinExperiment:
    """Truth at the observation times ``n·dtobs`` (n = 1..N) and the observations there."""

    scenario: str
    dtobs: float
    truth0: np.ndarray
    truth: np.ndarray
    observations: np.ndarray
    seed: int

    @property
    def cycles(self) -> int:
        return self.truth.shape[0]


@dataclass
class CycleResult:
    method: str
    rmse: float
    #: Posterior ensemble means at the observation times.
    means: np.ndarray
    #: ``(n·dtobs, posterior statistics)`` for every cycle.
    moments: list[tuple[float, EnsembleStats]] = field(default_factory=list)


def generate_truth_and_obs(scenario: Scenario, cycles: int | None = None, seed: int = 0) -> TwinExperiment:
    """Integrate the reference trajectory and draw ``y_n = H X†(n dtobs) + ν_n``, ``ν_n ~ N(0, R)``."""
    if not scenario.cycled or scenario.truth0 is None:
        raise ConfigError(f"scenario {scenario.name!r} is not a cycled twin experiment")
    cycles = scenario.cycles if cycles is None else cycles
    schedule = window_schedule(scenario.dtobs, scenario.dt)
    state = np.asarray(scenario.truth0, dtype=float)[None, :]
    truth = np.empty((cycles, scenario.dim))
    for n in range(cycles):
        for _, h in schedule:
            state = mean_field_ode_step(state, scenario.drift, h)
        truth[n] = state[0]
    chol = np.linalg.cholesky(scenario.obs.R)
    noise = RngStream(seed, _OBS_STREAM).generator().standard_normal((cycles, scenario.obs.obs_dim))
    observations = scenario.obs.forward(truth) + noise @ chol.T
    logger.info("twin experiment: %d cycles of %d steps", cycles, len(schedule))
    return TwinExperiment(
        scenario=scenario.name,
        dtobs=scenario.dtobs,
        truth0=np.asarray(scenario.truth0, dtype=float),
        truth=truth,
        observations=observations,
        seed=seed,
    )


def initial_twin_ensemble(twin: TwinExperiment, particles: int, spread: float, seed: int) -> Ensemble:
    """Initial ensemble ``N(X₀†, spread·I)``."""
    rng = RngStream(seed, _INIT_STREAM).generator()
    return twin.truth0 + math.sqrt(spread) * rng.standard_normal((particles, twin.truth0.shape[0]))


def run_assimilation_cycles(
    twin: TwinExperiment,
    scenario: Scenario,
    method: str = "homotopy",
    *,
    particles: int | None = None,
    inflation: float | None = None,
    seed: int | None = None,
    controls: bool = True,
) -> CycleResult:
    """Cycle the filter through every observation of *twin* and score the posterior means.

    ``homotopy`` restarts the homotopy clock at 0 in every cycle and
    propagates the previous posterior ensemble under the controlled
    dynamics, so the ensemble at the end of the window is the posterior.
    ``esrf`` propagates the uncontrolled dynamics and applies the square-root
    analysis at the end of each window.
    """
    if method not in ("homotopy", "esrf"):
        raise ConfigError(f"unknown method {method!r}; expected homotopy or esrf")
    particles = scenario.particles if particles is None else particles
    seed = twin.seed if seed is None else seed
    updates = {"T": twin.dtobs}
    if inflation is not None:
        updates["inflation"] = inflation
    homotopy = method == "homotopy" and controls
    config = scenario.assimilation_config(seed, controls=homotopy, **updates)

    ens = initial_twin_ensemble(twin, particles, scenario.init_spread, seed)
    means = np.empty_like(twin.truth)
    moments: list[tuple[float, EnsembleStats]] = []
    for n in range(twin.cycles):
        obs = scenario.obs.with_observation(twin.observations[n])
        label = f"{scenario.name} {method} cycle {n}"
        try:
            ens = propagate_window(ens, scenario.drift, obs, config, stream=n).ensemble
            if method == "esrf":
                ens = esrf_analysis(ens, obs)
        except NumericalError as exc:
            raise NumericalError(f"{label}: {exc}") from exc
        stats = ensemble_stats(ens)
        means[n] = stats.mean
        moments.append(((n + 1) * twin.dtobs, stats))
    score = rmse(means, twin.truth)
    logger.info("%s M=%d dtobs=%g inflation=%g: RMSE %.4f", method, particles, twin.dtobs, config.inflation, score)
    return CycleResult(method=method, rmse=score, means=means, moments=moments)


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepResult:
    cells: list[SweepCell] = field(default_factory=list)

    def best(self, method: str, particles: int, dtobs: float) -> SweepCell | None:
        """Smallest-RMSE cell over the inflation factors of one (method, M, dtobs) column."""
        column = [
            c
            for c in self.cells
            if c.method == method and c.M == particles and c.dtobs == dtobs and c.rmse is not None
        ]
        return min(column, key=lambda c: c.rmse) if column else None

    @property
    def failures(self) -> list[SweepCell]:
        return [c for c in self.cells if c.rmse is None]


@functools.lru_cache(maxsize=8)
def _cached_twin(name: str, dtobs: float, dt: float, cycles: int, seed: int) -> tuple[Scenario, TwinExperiment]:
    scenario = build_scenario(name, {"dtobs": dtobs, "dt": dt, "cycles": cycles})
    return scenario, generate_truth_and_obs(scenario, cycles, seed)


def run_sweep_cell(
    name: str,
    method: str,
    particles: int,
    dtobs: float,
    inflation: float,
    dt: float,
    cycles: int,
    seed: int,
) -> SweepCell:
    """Run one grid point; numerical failures are recorded on the cell instead of raised."""
    cell = SweepCell(method=method, M=particles, dtobs=dtobs, inflation=inflation)
    scenario, twin = _cached_twin(name, dtobs, dt, cycles, seed)
    try:
        result = run_assimilation_cycles(twin, scenario, method, particles=particles, inflation=inflation, seed=seed)
    except NumericalError as exc:
        logger.warning("sweep cell %s M=%d dtobs=%g inflation=%g failed: %s", method, particles, dtobs, inflation, exc)
        cell.error = str(exc)
        return cell
    cell.rmse = result.rmse
    return cell


def sweep_grid(config: SweepConfig) -> list[tuple[str, int, float, float]]:
    """Grid coordinates ``(method, M, dtobs, inflation)`` in output order."""
    return [
        (method, m, dtobs, inflation)
        for dtobs in config.dtobs_values
        for m in config.ensembles
        for method in config.methods
        for inflation in config.inflations
    ]


def sweep(config: SweepConfig, *, on_cell: Callable[[SweepCell], None] | None = None) -> SweepResult:
    """Run every (method, M, dtobs, inflation) cell; results come back in grid order.

    All cells of one ``dtobs`` share the same twin experiment.  With
    ``workers > 1`` cells run in a process pool; *on_cell* is called as each
    cell finishes.
    """
    if not (config.methods and config.ensembles and config.dtobs_values and config.inflations):
        raise ConfigError("sweep grids must be non-empty")
    grid = sweep_grid(config)
    common = (config.dt, config.cycles, config.seed)
    logger.info("sweep over %d cells with %d worker(s)", len(grid), config.workers)
    results: dict[tuple, SweepCell] = {}
    if config.workers > 1:
        pool = ProcessPoolExecutor(max_workers=config.workers, mp_context=multiprocessing.get_context("spawn"))
        try:
            futures = {pool.submit(run_sweep_cell, config.scenario, *key, *common): key for key in grid}
            for future in as_completed(futures):
                cell = future.result()
                results[futures[future]] = cell
                if on_cell:
                    on_cell(cell)
        except KeyboardInterrupt:
            pool.shutdown(wait=False, cancel_futures=True)
            raise
        pool.shutdown()
    else:
        for key in grid:
            cell = run_sweep_cell(config.scenario, *key, *common)
            results[key] = cell
            if on_cell:
                on_cell(cell)
    return SweepResult(cells=[results[key] for key in grid])


# ---------------------------------------------------------------------------
# Single assimilation windows
# ---------------------------------------------------------------------------


@dataclass
class WindowExperiment:
    scenario: Scenario
    run: WindowRun
    controls: bool
    #: Exact prior at ``T`` and posterior (linear-Gaussian scenarios only).
    prior_oracle: GaussianBelief | None = None
    posterior_oracle: GaussianBelief | None = None
    #: Extra diagnostics (effective sample size, importance-sampling and square-root filter means).
    diagnostics: dict[str, Any] = field(default_factory=dict)

    @property
    def final_ensemble(self) -> Ensemble:
        return self.run.ensemble

    @property
    def oracle(self) -> GaussianBelief | None:
        """The distribution the final ensemble should match."""
        return self.posterior_oracle if self.controls else self.prior_oracle


def single_window_experiment(
    scenario: Scenario,
    *,
    seed: int = 0,
    controls: bool = True,
    snapshot_times: Sequence[float] | None = None,
) -> WindowExperiment:
    """Run one homotopy window ``t ∈ [0, T]`` and compare with the available oracles."""
    if scenario.cycled:
        raise ConfigError(f"scenario {scenario.name!r} is cycled; use run_assimilation_cycles")
    ens0 = scenario.sample_prior(scenario.particles, seed)
    config = scenario.assimilation_config(seed, controls=controls)
    times = (0.0, scenario.T) if snapshot_times is None else snapshot_times
    run = propagate_window(ens0, scenario.drift, scenario.obs, config, snapshot_times=times, label=scenario.name)
    experiment = WindowExperiment(scenario=scenario, run=run, controls=controls)

    if scenario.linear_gaussian:
        F, b = scenario.drift.linear_parts()
        prior_T = gaussian_moment_propagation(scenario.prior, F, b, scenario.sigma, scenario.T, backend="exact")
        experiment.prior_oracle = prior_T
        experiment.posterior_oracle = kalman_analysis(prior_T, scenario.obs).posterior
    elif controls:
        # Uncontrolled prior push-forward, for the particle filter and square-root filter references.
        prior_config = scenario.assimilation_config(seed, controls=False)
        prior_ens = propagate_window(
            ens0, scenario.drift, scenario.obs, prior_config, stream=_PRIOR_STREAM, label=f"{scenario.name} prior"
        ).ensemble
        weights, ess = bootstrap_pf_diagnostics(prior_ens, scenario.obs)
        experiment.diagnostics["pf_ess"] = ess
        experiment.diagnostics["importance_mean"] = weighted_moments(prior_ens, weights).mean
        experiment.diagnostics["esrf_mean"] = ensemble_mean(esrf_analysis(prior_ens, scenario.obs))
        experiment.diagnostics["prior_ensemble"] = prior_ens
    logger.info("window %s finished after %d steps", scenario.name, len(run.reports))
    return experiment
