"""Time stepping for controlled particle systems.

Each step runs in two phases.  Phase one freezes the ensemble statistics in
a :class:`~bridgeflow.control.ControlContext`.  Phase two updates every
particle from that frozen context; the update is a vectorized array
operation with no cross-particle dependence.

Gaussian increments are counter based: the ``(M, d_x)`` block of draws for
step ``n`` of stream ``s`` depends only on ``(seed, s, n)``, and row ``i``
belongs to particle ``i``.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt

from bridgeflow.control import (
    ControlContext,
    build_context,
    gain_residual,
    grad_likelihood,
    homotopy_total_drift,
    linear_gaussian_control_drift,
    modified_forward_map,
    pure_diffusion_drift,
    pure_drift_control_drift,
)
from bridgeflow.dynamics import DriftModel, HomotopyClock, ObservationModel
from bridgeflow.ensemble import (
    Ensemble,
    EnsembleStats,
    as_ensemble,
    ensemble_stats,
    gaussian_score,
    require_well_conditioned,
)
from bridgeflow.errors import ConfigError, NumericalError
from bridgeflow.models import AssimilationConfig

logger = logging.getLogger(__name__)

DriftField = Callable[[Ensemble], np.ndarray]

#: Slack when converting ``T/dt`` to a step count.
_STEP_SLACK = 1e-9

_UINT64 = (1 << 64) - 1


@dataclass(frozen=True)
class RngStream:
    """Counter-based Gaussian stream keyed by ``(seed, stream)``."""

    seed: int
    stream: int = 0

    def normals(self, step: int, shape: tuple[int, ...]) -> np.ndarray:
        """Standard normal block for *step*; identical for identical ``(seed, stream, step, shape)``."""
        key = np.array([self.seed & _UINT64, self.stream & _UINT64], dtype=np.uint64)
        counter = np.array([0, 0, 0, step & _UINT64], dtype=np.uint64)
        generator = np.random.Generator(np.random.Philox(key=key, counter=counter))
        return generator.standard_normal(shape)

    def generator(self) -> np.random.Generator:
        """A fresh generator positioned at the start of the stream."""
        key = np.array([self.seed & _UINT64, self.stream & _UINT64], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class StepReport:
    t_before: float
    t_after: float
    max_control_norm: float
    stats_snapshot: EnsembleStats


@dataclass
class WindowRun:
    """Result of :func:`propagate_window`."""

    ensemble: Ensemble
    reports: list[StepReport]
    final_stats: EnsembleStats
    #: ``(t, ensemble copy)`` pairs recorded at the requested snapshot times.
    snapshots: list[tuple[float, Ensemble]] = field(default_factory=list)

    def moments(self) -> list[tuple[float, EnsembleStats]]:
        """Ensemble moments at the start of every step plus the final time."""
        rows = [(r.t_before, r.stats_snapshot) for r in self.reports]
        rows.append((self.reports[-1].t_after if self.reports else 0.0, self.final_stats))
        return rows


def window_schedule(T: float, dt: float) -> list[tuple[float, float]]:
    """``(t, step)`` pairs covering ``[0, T]``; the last step takes the remainder."""
    if T <= 0 or dt <= 0:
        raise ValueError(f"need T > 0 and dt > 0, got T={T}, dt={dt}")
    n = max(1, math.ceil(T / dt - _STEP_SLACK))
    schedule = [(k * dt, dt) for k in range(n - 1)]
    t_last = (n - 1) * dt
    schedule.append((t_last, T - t_last))
    return schedule


def check_finite(ens: Ensemble, t: float, label: str = "") -> None:
    """Raise :class:`NumericalError` naming the first particle with a non-finite entry."""
    finite = np.isfinite(ens)
    if not finite.all():
        index = int(np.flatnonzero(~finite.all(axis=1))[0])
        where = f" ({label})" if label else ""
        raise NumericalError(f"non-finite state for particle {index} at t={t:.6g}{where}")


def euler_maruyama_step(
    ens: npt.ArrayLike,
    drift_field: DriftField,
    sigma: float,
    dt: float,
    rng: RngStream,
    *,
    step: int = 0,
) -> Ensemble:
    """``x ← x + dt·drift(x) + √(2σ dt) ξ`` with one independent draw per particle."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    ens = as_ensemble(ens)
    updated = ens + dt * drift_field(ens)
    if sigma > 0:
        updated = updated + math.sqrt(2.0 * sigma * dt) * rng.normals(step, ens.shape)
    return updated


def mean_field_ode_step(ens: npt.ArrayLike, drift_field: DriftField, dt: float) -> Ensemble:
    """Deterministic Euler step of a mean-field ODE."""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    ens = as_ensemble(ens)
    return ens + dt * drift_field(ens)


def robust_gain_increment(
    cross_x: np.ndarray,
    cov_hat: np.ndarray,
    r_hat: np.ndarray,
    residual: np.ndarray,
    dt: float,
) -> np.ndarray:
    """``-Δt Σ^{xĥ} (Δt Σ^{ĥĥ} + R̂)⁻¹ r`` for each row ``r`` of *residual*."""
    matrix = dt * cov_hat + r_hat
    require_well_conditioned(matrix, "robust step matrix")
    solved = np.linalg.solve(matrix, np.atleast_2d(residual).T)
    return -dt * (cross_x @ solved).T


def robust_gain_step(ens: npt.ArrayLike, ctx: ControlContext, dt: float | None = None) -> Ensemble:
    """Apply the gain terms of the constant-gain control with the regularized update.

    The first term uses ``ĥ = h`` and ``R̂ = (ΔtT/(t+Δt)) R``; the second
    (absent at ``t = 0``) uses ``ĥ = h̃`` and ``R̂ = -(ΔtT/t) R``.  Both reduce
    to the explicit Euler gain step when ``Δt Σ^{ĥĥ}`` is small next to ``R̂``.
    """
    ens = as_ensemble(ens)
    dt = ctx.dt if dt is None else dt
    t, T, R = ctx.t, ctx.T, ctx.obs.R
    r_h = gain_residual(ctx, ctx.obs.forward(ens), ctx.mean_h)
    increment = robust_gain_increment(ctx.cross_xh, ctx.cov_hh, (dt * T / (t + dt)) * R, r_h, dt)
    if t > 0:
        if ctx.cross_xht is None:
            raise ValueError("context was built without the modified forward map statistics")
        r_ht = gain_residual(ctx, modified_forward_map(ctx, ens), ctx.mean_ht)
        increment = increment + robust_gain_increment(ctx.cross_xht, ctx.cov_htht, -(dt * T / t) * R, r_ht, dt)
    return ens + increment


def inflation_drift(ens_mean: np.ndarray, factor: float, x: npt.ArrayLike) -> np.ndarray:
    """Multiplicative inflation as an extra drift ``factor·(x - mean)``."""
    if factor < 0:
        raise ValueError(f"inflation factor must be non-negative, got {factor}")
    return factor * (np.asarray(x, dtype=float) - ens_mean)


def _check_law(config: AssimilationConfig, drift: DriftModel) -> None:
    law, scheme = config.law, config.scheme
    if law == "pure-diffusion" and drift.kind != "zero":
        raise ConfigError(f"the pure-diffusion law needs zero drift, got {drift.kind}")
    if law == "pure-drift" and config.sigma != 0:
        raise ConfigError(f"the pure-drift law needs sigma = 0, got sigma={config.sigma}")
    if law == "linear-gaussian":
        if not drift.is_linear:
            raise ConfigError(f"the linear-gaussian law needs a linear drift, got {drift.kind}")
        if scheme != "meanfield":
            raise ConfigError("the linear-gaussian law is a mean-field ODE; use the meanfield scheme")
    if scheme == "robust" and law != "generic":
        raise ConfigError(f"the robust scheme applies to the generic law only, got {law}")
    if scheme == "robust" and config.corrector:
        raise ConfigError("the corrector stage applies to the euler and meanfield schemes only")


def _law_drift(ctx: ControlContext, config: AssimilationConfig, ens: Ensemble) -> np.ndarray:
    """Drift of the configured law minus the base drift ``f`` (and minus its own score term)."""
    law = config.law
    if law == "generic":
        return homotopy_total_drift(ctx, ens) - ctx.drift(ens)
    if law == "pure-diffusion":
        return pure_diffusion_drift(ctx.clock, ctx.sigma, ctx.obs, ctx.stats, ens)
    if law == "pure-drift":
        return pure_drift_control_drift(ctx, ens) - ctx.drift(ens)
    if law == "linear-gaussian":
        control = linear_gaussian_control_drift(ctx, ens, config.score_reg) - ctx.drift(ens)
        if ctx.sigma != 0:
            control = control + ctx.sigma * gaussian_score(ctx.stats, ens, config.score_reg)
        return control
    return np.zeros_like(ens)


def _step_drift(
    ens: Ensemble,
    clock: HomotopyClock,
    drift: DriftModel,
    obs: ObservationModel,
    config: AssimilationConfig,
) -> tuple[np.ndarray, np.ndarray, ControlContext]:
    """Deterministic velocity of every particle, its control part and the frozen context."""
    sigma, scheme, law = config.sigma, config.scheme, config.law
    needs_modified = law == "generic" or scheme == "robust"
    ctx = build_context(ens, clock, sigma, drift, obs, gradient=config.gradient, with_modified=needs_modified)
    base = drift(ens)
    if config.inflation:
        base = base + inflation_drift(ctx.stats.mean, config.inflation, ens)
    # meanfield: the diffusion is replaced by its deterministic counterpart -σ∇log π
    if scheme == "meanfield" and sigma != 0:
        base = base - sigma * gaussian_score(ctx.stats, ens, config.score_reg)

    if scheme == "robust":
        h = clock.dt
        explicit = -(2.0 * sigma * clock.t / config.T) * grad_likelihood(ctx, ens)
        gain = robust_gain_step(ens, ctx, h) - ens
        control = config.control_scale * (explicit + gain / h)
    else:
        control = config.control_scale * _law_drift(ctx, config, ens)
    return base + control, control, ctx


@np.errstate(over="ignore", invalid="ignore")
def propagate_window(
    ens: npt.ArrayLike,
    drift: DriftModel,
    obs: ObservationModel,
    config: AssimilationConfig,
    *,
    stream: int = 0,
    snapshot_times: Sequence[float] = (),
    label: str = "",
) -> WindowRun:
    """Advance the homotopy clock from 0 to ``config.T`` in ``⌈T/dt⌉`` steps.

    The control context is rebuilt at the start of every step.  With
    ``config.corrector`` each step is a Heun predictor-corrector: the
    velocity is averaged over the start of the step and the Euler predictor,
    and both stages share the step's Gaussian increment.  *stream* selects
    the noise stream (e.g. the assimilation cycle), *label* names the run in
    error messages.
    """
    _check_law(config, drift)
    ens = as_ensemble(ens).copy()
    sigma = config.sigma
    rng = RngStream(config.seed, stream)
    schedule = window_schedule(config.T, config.dt)
    grid = np.array([t for t, _ in schedule] + [config.T])
    wanted = {int(np.argmin(np.abs(grid - s))) for s in snapshot_times}

    snapshots: list[tuple[float, Ensemble]] = []
    reports: list[StepReport] = []
    for step, (t, h) in enumerate(schedule):
        if step in wanted:
            snapshots.append((float(grid[step]), ens.copy()))
        t_after = config.T if step == len(schedule) - 1 else t + h
        velocity, control, ctx = _step_drift(ens, HomotopyClock(t=t, T=config.T, dt=h), drift, obs, config)
        noise: np.ndarray | float = 0.0
        if config.scheme != "meanfield" and sigma > 0:
            noise = math.sqrt(2.0 * sigma * h) * rng.normals(step, ens.shape)
        updated = ens + h * velocity + noise
        if config.corrector:
            check_finite(updated, t_after, label)
            clock_after = HomotopyClock(t=min(t_after, config.T), T=config.T, dt=h)
            predicted, _, _ = _step_drift(updated, clock_after, drift, obs, config)
            updated = ens + 0.5 * h * (velocity + predicted) + noise

        check_finite(updated, t_after, label)
        max_norm = float(np.max(np.linalg.norm(control, axis=1))) if control.size else 0.0
        reports.append(StepReport(t_before=t, t_after=t_after, max_control_norm=max_norm, stats_snapshot=ctx.stats))
        logger.debug("step %d t=%.6g max control norm %.3e", step, t, max_norm)
        ens = updated

    if len(schedule) in wanted:
        snapshots.append((config.T, ens.copy()))
    return WindowRun(ensemble=ens, reports=reports, final_stats=ensemble_stats(ens), snapshots=snapshots)
