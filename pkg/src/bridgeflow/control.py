"""Homotopy control laws.

The homotopy density ``π_t^h ∝ exp(-(t/T) L) π_t`` deforms the prior flow
into the posterior at ``t = T``.  The control that keeps an interacting
particle system on this path is approximated by an ensemble Kalman style
constant gain built from cross-covariances of the current ensemble.  The
control PDE itself is never solved.

Assumptions carried by every law in this module:

* the forward map is linear, so ``ΔL`` is constant and its correction term
  drops out;
* the normalization rate ``Ż_t/Z_t`` never appears because the gain acts on
  centred residuals ``½(h(x) + π[h]) - y``;
* the ``Δt`` inside the modified forward map is the integrator step;
* statistics and ``t`` are frozen at the start of each step.

All drift functions accept one state ``(d_x,)`` or a batch ``(M, d_x)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt

from bridgeflow.dynamics import DriftModel, HomotopyClock, ObservationModel
from bridgeflow.ensemble import (
    Ensemble,
    EnsembleStats,
    as_ensemble,
    cross_covariance,
    default_score_reg,
    ensemble_covariance,
    ensemble_mean,
    ensemble_stats,
    gaussian_score,
    statistical_linearization,
)

logger = logging.getLogger(__name__)

#: Gradient backends for ``∇L``.
GRADIENTS = ("analytic", "stein")


@dataclass(frozen=True)
class ControlContext:
    """Everything a control law needs for one step, computed from one ensemble snapshot."""

    clock: HomotopyClock
    sigma: float
    obs: ObservationModel
    drift: DriftModel
    stats: EnsembleStats
    #: ``Σ^{xh}`` and ``Σ^{xf}``.
    cross_xh: np.ndarray
    cross_xf: np.ndarray
    #: ``π[h]`` and ``π[f]``.
    mean_h: np.ndarray
    mean_f: np.ndarray
    #: ``Σ^{hh}``, used by the robust step.
    cov_hh: np.ndarray
    #: Forward-map Jacobian used for ``∇L``: ``H`` itself, or its Stein estimate.
    jacobian: np.ndarray
    gradient: str = "analytic"
    #: ``Σ^{xh̃}``, ``π[h̃]`` and ``Σ^{h̃h̃}``; ``None`` when built without the modified map.
    cross_xht: np.ndarray | None = None
    mean_ht: np.ndarray | None = None
    cov_htht: np.ndarray | None = None

    @property
    def t(self) -> float:
        return self.clock.t

    @property
    def T(self) -> float:
        return self.clock.T

    @property
    def dt(self) -> float:
        return self.clock.dt


def grad_likelihood(ctx: ControlContext, x: npt.ArrayLike) -> np.ndarray:
    """``∇L(x) = JᵀR⁻¹(Hx - y)`` with ``J = H`` (analytic) or its Stein estimate."""
    residual = ctx.obs.forward(x) - ctx.obs.y
    return residual @ ctx.obs.R_inv @ ctx.jacobian


def modified_forward(
    obs: ObservationModel,
    drift: DriftModel,
    x: npt.ArrayLike,
    *,
    sigma: float,
    t: float,
    T: float,
    dt: float,
    grad: np.ndarray | None = None,
) -> np.ndarray:
    """``h̃(x) = h(x - Δt f(x) + Δt (σt/T) ∇L(x))``.

    *grad* overrides the analytic ``∇L(x)``.  ``dt = 0`` collapses the map
    to ``h``.
    """
    x = np.asarray(x, dtype=float)
    if grad is None:
        grad = obs.grad_neg_log_likelihood(x)
    shifted = x - dt * drift(x) + dt * (sigma * t / T) * grad
    return obs.forward(shifted)


def modified_forward_map(ctx: ControlContext, x: npt.ArrayLike) -> np.ndarray:
    """The modified forward map ``h̃`` at the context's clock."""
    return modified_forward(
        ctx.obs,
        ctx.drift,
        x,
        sigma=ctx.sigma,
        t=ctx.t,
        T=ctx.T,
        dt=ctx.dt,
        grad=grad_likelihood(ctx, x),
    )


def build_context(
    ens: Ensemble,
    clock: HomotopyClock,
    sigma: float,
    drift: DriftModel,
    obs: ObservationModel,
    *,
    gradient: str = "analytic",
    with_modified: bool = True,
) -> ControlContext:
    """Freeze the ensemble statistics the control laws need at the start of a step.

    ``with_modified=False`` skips the statistics of the modified forward map,
    which only the generic constant-gain control and the robust step use.
    """
    if gradient not in GRADIENTS:
        raise ValueError(f"unknown gradient backend {gradient!r}; expected one of {GRADIENTS}")
    ens = as_ensemble(ens)
    stats = ensemble_stats(ens)
    h_values = obs.forward(ens)
    if gradient == "stein":
        jacobian = statistical_linearization(ens, h_values, reg=default_score_reg(stats.cov))
    else:
        jacobian = obs.H
    f_values = drift(ens)
    modified = {}
    if with_modified:
        grad_values = (h_values - obs.y) @ obs.R_inv @ jacobian
        shifted = ens - clock.dt * f_values + clock.dt * (sigma * clock.t / clock.T) * grad_values
        ht_values = obs.forward(shifted)
        modified = {
            "cross_xht": cross_covariance(ens, ht_values),
            "mean_ht": ensemble_mean(ht_values),
            "cov_htht": ensemble_covariance(ht_values),
        }
    return ControlContext(
        clock=clock,
        sigma=sigma,
        obs=obs,
        drift=drift,
        stats=stats,
        cross_xh=cross_covariance(ens, h_values),
        cross_xf=cross_covariance(ens, f_values),
        mean_h=ensemble_mean(h_values),
        mean_f=ensemble_mean(f_values),
        cov_hh=ensemble_covariance(h_values),
        jacobian=jacobian,
        gradient=gradient,
        **modified,
    )


def gain_weights(clock: HomotopyClock) -> tuple[float, float]:
    """Weights of ``Σ^{xh}R⁻¹`` and ``Σ^{xh̃}R⁻¹`` in the constant-gain control."""
    t, T, dt = clock.t, clock.T, clock.dt
    return (t + dt) / (dt * T), t / (dt * T)


def gain_residual(ctx: ControlContext, values: np.ndarray, mean_values: np.ndarray) -> np.ndarray:
    """Centred residual ``½(v(x) + π[v]) - y``."""
    return 0.5 * (values + mean_values) - ctx.obs.y


def constant_gain_control(ctx: ControlContext, x: npt.ArrayLike) -> np.ndarray:
    """Constant-gain approximation ``ĝ_t^KF`` of the homotopy control.

    ``-((t+Δt)/(ΔtT)) Σ^{xh}R⁻¹(½(h(x)+π[h]) - y) + (t/(ΔtT)) Σ^{xh̃}R⁻¹(½(h̃(x)+π[h̃]) - y)``
    """
    x = np.asarray(x, dtype=float)
    w_h, w_ht = gain_weights(ctx.clock)
    r_h = gain_residual(ctx, ctx.obs.forward(x), ctx.mean_h)
    control = -w_h * (r_h @ ctx.obs.R_inv @ ctx.cross_xh.T)
    if w_ht != 0.0:
        if ctx.cross_xht is None:
            raise ValueError("context was built without the modified forward map statistics")
        r_ht = gain_residual(ctx, modified_forward_map(ctx, x), ctx.mean_ht)
        control = control + w_ht * (r_ht @ ctx.obs.R_inv @ ctx.cross_xht.T)
    return control


def homotopy_total_drift(ctx: ControlContext, x: npt.ArrayLike) -> np.ndarray:
    """Drift ``f(x) - (2σt/T)∇L(x) + ĝ_t^KF(x)`` of the controlled particle SDE."""
    x = np.asarray(x, dtype=float)
    drift = ctx.drift(x) + constant_gain_control(ctx, x)
    if ctx.sigma != 0.0:
        drift = drift - (2.0 * ctx.sigma * ctx.t / ctx.T) * grad_likelihood(ctx, x)
    return drift


def omega_matrix(clock: HomotopyClock, sigma: float, obs: ObservationModel) -> np.ndarray:
    """``Ω(t) = (1/T)R⁻¹ - (2σt²/T²) R⁻¹HHᵀR⁻¹``; its sign decides whether the gain attracts or repels."""
    t, T = clock.t, clock.T
    R_inv = obs.R_inv
    return R_inv / T - (2.0 * sigma * t**2 / T**2) * (R_inv @ obs.H @ obs.H.T @ R_inv)


def pure_diffusion_drift(
    clock: HomotopyClock,
    sigma: float,
    obs: ObservationModel,
    stats: EnsembleStats,
    x: npt.ArrayLike,
) -> np.ndarray:
    """Drift of the controlled SDE for ``f = 0``.

    ``-(2σt/T) HᵀR⁻¹(Hx - y) - Σ Hᵀ Ω(t) (½H(x + μ) - y)``
    """
    x = np.asarray(x, dtype=float)
    t, T = clock.t, clock.T
    residual = 0.5 * obs.forward(x + stats.mean) - obs.y
    omega = omega_matrix(clock, sigma, obs)
    gain = residual @ omega @ obs.H @ stats.cov
    return -(2.0 * sigma * t / T) * obs.grad_neg_log_likelihood(x) - gain


def pure_drift_control_drift(ctx: ControlContext, x: npt.ArrayLike) -> np.ndarray:
    """Controlled mean-field drift for ``σ = 0`` (first order in ``Δt`` dropped).

    ``f(x) - (1/T)(Σ + tΣ^{xf}) HᵀR⁻¹(½H(x+μ) - y) - (t/2T) Σ HᵀR⁻¹H (f(x) + π[f])``
    """
    x = np.asarray(x, dtype=float)
    t, T = ctx.t, ctx.T
    obs, cov = ctx.obs, ctx.stats.cov
    f_x = ctx.drift(x)
    weighted = (0.5 * obs.forward(x + ctx.stats.mean) - obs.y) @ obs.R_inv @ obs.H
    gain = weighted @ (cov + t * ctx.cross_xf).T / T
    coupling = (t / (2.0 * T)) * ((f_x + ctx.mean_f) @ obs.hessian @ cov)
    return f_x - gain - coupling


def linear_gaussian_control_drift(ctx: ControlContext, x: npt.ArrayLike, reg: float | None = None) -> np.ndarray:
    """Mean-field ODE drift for linear drift ``f(x) = Fx + b`` and Gaussian laws.

    Contains the score term ``σΣ⁻¹(x - μ)``, so it is integrated without
    noise.  *reg* regularizes the covariance solve (see
    :func:`bridgeflow.ensemble.gaussian_score`).
    """
    x = np.asarray(x, dtype=float)
    F, b = ctx.drift.linear_parts()
    t, T, sigma = ctx.t, ctx.T, ctx.sigma
    obs, cov, mean = ctx.obs, ctx.stats.cov, ctx.stats.mean
    hessian = obs.hessian
    bracket = cov / T + (t / T) * cov @ F.T - (2.0 * sigma * t**2 / T**2) * cov @ hessian
    weighted = (0.5 * obs.forward(x + mean) - obs.y) @ obs.R_inv @ obs.H
    coupling = (0.5 * (x + mean) @ F.T + b) @ hessian @ cov
    drift = x @ F.T + b - weighted @ bracket.T - (t / T) * coupling
    if sigma != 0.0:
        drift = drift - sigma * gaussian_score(ctx.stats, x, reg)
        drift = drift - (2.0 * sigma * t / T) * obs.grad_neg_log_likelihood(x)
    return drift
