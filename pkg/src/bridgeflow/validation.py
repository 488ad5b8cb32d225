"""Self-checks run by ``bridgeflow validate``.

Each check returns a :class:`~bridgeflow.models.CheckResult`; a check never
raises for a wrong answer, only for programming errors.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Callable

import numpy as np

from bridgeflow.baselines import esrf_analysis, gaussian_moment_propagation, kalman_analysis
from bridgeflow.control import (
    build_context,
    homotopy_total_drift,
    omega_matrix,
    pure_diffusion_drift,
    pure_drift_control_drift,
)
from bridgeflow.dynamics import HomotopyClock
from bridgeflow.ensemble import GaussianBelief, cross_covariance, ensemble_covariance, ensemble_stats
from bridgeflow.experiments import build_scenario
from bridgeflow.integrators import RngStream, propagate_window
from bridgeflow.models import AssimilationConfig, CheckResult

logger = logging.getLogger(__name__)

#: Tolerances of the moment-matching check (mean: absolute, covariance: relative to its norm).
MOMENT_MEAN_TOL = 5e-3
MOMENT_COV_TOL = 0.025


def _rng(seed: int, purpose: int) -> np.random.Generator:
    return RngStream(seed, 1 << 41 | purpose).generator()


def _relative(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(float(np.max(np.abs(b))), np.finfo(float).tiny)
    return float(np.max(np.abs(a - b))) / scale


def check_stein_identity(seed: int = 0) -> CheckResult:
    """``Σ^{xh} = Σ^{xx}Hᵀ`` for a linear forward map."""
    scenario = build_scenario("linear-2d")
    ens = scenario.prior.sample(1000, _rng(seed, 1))
    cross = cross_covariance(ens, scenario.obs.forward(ens))
    expected = ensemble_covariance(ens) @ scenario.obs.H.T
    error = _relative(cross, expected)
    return CheckResult(name="stein-identity", passed=error <= 1e-12, detail=f"relative error {error:.2e}")


def check_omega_sign_change(seed: int = 0) -> CheckResult:
    """``Ω(t)`` of the pure-diffusion example vanishes at ``t = √2/20`` and changes sign there."""
    scenario = build_scenario("pure-diffusion")
    t0 = math.sqrt(2.0) / 20.0

    def omega(t: float) -> float:
        clock = HomotopyClock(t=t, T=scenario.T, dt=scenario.dt)
        return float(omega_matrix(clock, scenario.sigma, scenario.obs)[0, 0])

    at_root = omega(t0)
    tolerance = 1e-12 * float(np.linalg.norm(scenario.obs.R_inv))
    passed = abs(at_root) <= tolerance and omega(t0 - 1e-3) > 0 > omega(t0 + 1e-3)
    return CheckResult(name="omega-sign-change", passed=passed, detail=f"Ω(√2/20) = {at_root:.3e}")


def check_pure_diffusion_specialization(seed: int = 0) -> CheckResult:
    """The generic drift equals the closed-form pure-diffusion drift at ``t = 0``."""
    scenario = build_scenario("pure-diffusion")
    ens = scenario.prior.sample(200, _rng(seed, 3))
    clock = HomotopyClock(t=0.0, T=scenario.T, dt=scenario.dt)
    ctx = build_context(ens, clock, scenario.sigma, scenario.drift, scenario.obs)
    generic = homotopy_total_drift(ctx, ens)
    closed = pure_diffusion_drift(clock, scenario.sigma, scenario.obs, ctx.stats, ens)
    gap = float(np.max(np.abs(generic - closed)))
    return CheckResult(name="pure-diffusion-specialization", passed=gap <= 1e-10, detail=f"max gap {gap:.2e}")


def check_pure_drift_first_order(seed: int = 0) -> CheckResult:
    """The generic drift approaches the pure-drift law linearly in ``Δt``."""
    scenario = build_scenario("lorenz63")
    ens = np.asarray(scenario.truth0) + _rng(seed, 4).standard_normal((20, 3))
    obs = scenario.obs.with_observation(np.array([scenario.truth0[0] + 0.5]))
    gaps = []
    for dt in (1e-3, 5e-4):
        clock = HomotopyClock(t=0.5 * scenario.T, T=scenario.T, dt=dt)
        ctx = build_context(ens, clock, 0.0, scenario.drift, obs)
        gaps.append(float(np.max(np.abs(homotopy_total_drift(ctx, ens) - pure_drift_control_drift(ctx, ens)))))
    ratio = gaps[0] / gaps[1] if gaps[1] > 0 else math.inf
    return CheckResult(
        name="pure-drift-first-order",
        passed=1.6 <= ratio <= 2.4,
        detail=f"gaps {gaps[0]:.3e} -> {gaps[1]:.3e}, ratio {ratio:.3f}",
    )


def check_null_data_limit(seed: int = 0) -> CheckResult:
    """Inflating ``R`` by 10¹² switches the control off."""
    scenario = build_scenario("linear-2d")
    obs = scenario.obs.with_noise_scaled(1e12)
    ens = scenario.prior.sample(500, _rng(seed, 5))
    worst = 0.0
    for t in (0.0, 0.5, 1.0):
        clock = HomotopyClock(t=t, T=scenario.T, dt=scenario.dt)
        ctx = build_context(ens, clock, scenario.sigma, scenario.drift, obs)
        control = homotopy_total_drift(ctx, ens) - scenario.drift(ens)
        worst = max(worst, float(np.max(np.abs(control))))
    return CheckResult(name="null-data-limit", passed=worst <= 1e-6, detail=f"max control {worst:.2e}")


def check_esrf_exactness(seed: int = 0) -> CheckResult:
    """Square-root analysis moments equal the Kalman update of the forecast sample moments."""
    scenario = build_scenario("linear-2d")
    ens = scenario.prior.sample(50, _rng(seed, 6))
    stats = ensemble_stats(ens)
    expected = kalman_analysis(GaussianBelief(mean=stats.mean, cov=stats.cov), scenario.obs).posterior
    analysis = ensemble_stats(esrf_analysis(ens, scenario.obs))
    gap = max(
        float(np.max(np.abs(analysis.mean - expected.mean))),
        float(np.max(np.abs(analysis.cov - expected.cov))),
    )
    return CheckResult(name="esrf-exactness", passed=gap <= 1e-10, detail=f"max moment gap {gap:.2e}")


def check_double_well_gradient(seed: int = 0) -> CheckResult:
    """Double-well drift against central differences of the potential."""
    scenario = build_scenario("double-well")
    drift = scenario.drift
    points = scenario.sample_prior(5, seed) + 0.1 * _rng(seed, 8).standard_normal((5, 2))
    step = 1e-6
    worst = 0.0
    for x in points:
        numeric = np.empty(2)
        for k in range(2):
            e = np.zeros(2)
            e[k] = step
            numeric[k] = -(drift.potential(x + e) - drift.potential(x - e)) / (2 * step)
        analytic = drift(x)
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1.0)))
    return CheckResult(name="double-well-gradient", passed=worst <= 1e-5, detail=f"relative error {worst:.2e}")


def check_linear_gaussian_moments(seed: int = 0, fault_scale: float = 1.0) -> CheckResult:
    """Mean-field linear-2d run against the Kalman oracle of its own initial sample moments.

    *fault_scale* multiplies the data-driven part of the control; any value
    far enough from 1 must make this check fail.
    """
    scenario = build_scenario("linear-2d")
    ens0 = scenario.prior.sample(500, _rng(seed, 7))
    config = AssimilationConfig(
        T=scenario.T,
        dt=5e-4,
        sigma=scenario.sigma,
        seed=seed,
        scheme="meanfield",
        law="linear-gaussian",
        control_scale=fault_scale,
    )
    final = propagate_window(ens0, scenario.drift, scenario.obs, config, label="validate").final_stats
    start = ensemble_stats(ens0)
    F, b = scenario.drift.linear_parts()
    prior_T = gaussian_moment_propagation(
        GaussianBelief(mean=start.mean, cov=start.cov), F, b, scenario.sigma, scenario.T, backend="exact"
    )
    oracle = kalman_analysis(prior_T, scenario.obs).posterior
    mean_gap = float(np.max(np.abs(final.mean - oracle.mean)))
    cov_gap = float(np.linalg.norm(final.cov - oracle.cov) / np.linalg.norm(oracle.cov))
    passed = mean_gap <= MOMENT_MEAN_TOL and cov_gap <= MOMENT_COV_TOL
    detail = f"mean gap {mean_gap:.2e}, relative covariance gap {cov_gap:.2e}"
    if fault_scale != 1.0:
        detail += f" (control scaled by {fault_scale})"
    return CheckResult(name="linear-gaussian-moments", passed=passed, detail=detail)


CHECKS: dict[str, Callable[..., CheckResult]] = {
    "stein-identity": check_stein_identity,
    "omega-sign-change": check_omega_sign_change,
    "pure-diffusion-specialization": check_pure_diffusion_specialization,
    "pure-drift-first-order": check_pure_drift_first_order,
    "null-data-limit": check_null_data_limit,
    "esrf-exactness": check_esrf_exactness,
    "double-well-gradient": check_double_well_gradient,
    "linear-gaussian-moments": check_linear_gaussian_moments,
}


def run_validation(seed: int = 0, fault_scale: float = 1.0) -> list[CheckResult]:
    """Run every check in :data:`CHECKS` order."""
    results = []
    for name, check in CHECKS.items():
        if name == "linear-gaussian-moments":
            result = check(seed, fault_scale=fault_scale)
        else:
            result = check(seed)
        logger.info("%s %s: %s", "PASS" if result.passed else "FAIL", result.name, result.detail)
        results.append(result)
    return results
