"""Reference methods: exact Gaussian moments, the Kalman analysis, the
ensemble transform (square-root) filter and bootstrap particle filter
diagnostics.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
import numpy.typing as npt
import scipy.linalg
from scipy.special import logsumexp

from bridgeflow.dynamics import ObservationModel
from bridgeflow.ensemble import Ensemble, GaussianBelief, as_ensemble, ensemble_mean, symmetrize
from bridgeflow.errors import NumericalError
from bridgeflow.integrators import window_schedule

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class KalmanResult:
    posterior: GaussianBelief
    gain: np.ndarray
    innovation: np.ndarray


def gaussian_moment_propagation(
    belief: GaussianBelief,
    F: npt.ArrayLike,
    b: npt.ArrayLike,
    sigma: float,
    T: float,
    dt: float = 0.005,
    *,
    backend: Literal["euler", "exact"] = "euler",
) -> GaussianBelief:
    """Moments of ``dX = (FX + b)dt + √(2σ) dW`` after time *T*.

    ``euler`` integrates ``dμ/dt = Fμ + b`` and ``dΣ/dt = FΣ + ΣFᵀ + 2σI``
    with step *dt* (the same first-order bias as the particle integrator);
    ``exact`` uses matrix exponentials and ignores *dt*.
    """
    F = np.atleast_2d(np.asarray(F, dtype=float))
    dim = F.shape[0]
    b = np.asarray(b, dtype=float).reshape(dim)
    mean = np.asarray(belief.mean, dtype=float).reshape(dim)
    cov = np.atleast_2d(np.asarray(belief.cov, dtype=float))
    noise = 2.0 * sigma * np.eye(dim)

    if backend == "exact":
        # Affine flow: exponential of the augmented generator.
        generator = np.zeros((dim + 1, dim + 1))
        generator[:dim, :dim] = F
        generator[:dim, dim] = b
        flow = scipy.linalg.expm(generator * T)
        phi = flow[:dim, :dim]
        mean_T = phi @ mean + flow[:dim, dim]
        # Van Loan block exponential for the accumulated noise.
        block = np.zeros((2 * dim, 2 * dim))
        block[:dim, :dim] = -F
        block[:dim, dim:] = noise
        block[dim:, dim:] = F.T
        van_loan = scipy.linalg.expm(block * T)
        phi_T = van_loan[dim:, dim:].T
        accumulated = phi_T @ van_loan[:dim, dim:]
        cov_T = phi @ cov @ phi.T + accumulated
        return GaussianBelief(mean=mean_T, cov=symmetrize(cov_T))
    if backend != "euler":
        raise ValueError(f"unknown moment propagation backend {backend!r}")

    for _, h in window_schedule(T, dt):
        mean, cov = mean + h * (F @ mean + b), cov + h * (F @ cov + cov @ F.T + noise)
    return GaussianBelief(mean=mean, cov=symmetrize(cov))


def kalman_analysis(prior: GaussianBelief, obs: ObservationModel) -> KalmanResult:
    """Exact Bayesian update of a Gaussian prior with a linear Gaussian observation."""
    H, R = obs.H, obs.R
    mean = np.asarray(prior.mean, dtype=float)
    cov = np.atleast_2d(np.asarray(prior.cov, dtype=float))
    innovation_cov = symmetrize(H @ cov @ H.T + R)
    gain = scipy.linalg.solve(innovation_cov, H @ cov, assume_a="pos").T
    innovation = obs.y - H @ mean
    posterior = GaussianBelief(mean=mean + gain @ innovation, cov=symmetrize(cov - gain @ H @ cov))
    return KalmanResult(posterior=posterior, gain=gain, innovation=innovation)


def esrf_analysis(ens: npt.ArrayLike, obs: ObservationModel) -> Ensemble:
    """Ensemble transform Kalman filter analysis with the symmetric square root.

    The analysis mean and sample covariance equal the Kalman update of the
    forecast sample statistics exactly for linear ``h``.
    """
    E = as_ensemble(ens)
    M = E.shape[0]
    if M < 2:
        raise ValueError(f"the square-root filter needs at least 2 particles, got {M}")
    mean = ensemble_mean(E)
    A = E - mean
    hE = obs.forward(E)
    h_mean = ensemble_mean(hE)
    Y = hE - h_mean
    dy = obs.y - h_mean

    C = symmetrize(Y @ obs.R_inv @ Y.T + (M - 1) * np.eye(M))
    eigvals, V = np.linalg.eigh(C)
    if eigvals.min() <= 0 or not np.isfinite(eigvals).all():
        raise NumericalError(f"ensemble transform matrix is not positive definite (min eigenvalue {eigvals.min():.3e})")
    transform = (V * eigvals**-0.5) @ V.T * math.sqrt(M - 1)
    weights = dy @ obs.R_inv @ Y.T @ ((V / eigvals) @ V.T)
    return mean + weights @ A + transform @ A


def bootstrap_pf_diagnostics(ens: npt.ArrayLike, obs: ObservationModel) -> tuple[np.ndarray, float]:
    """Importance weights ``∝ exp(-L(x_i))`` and the effective sample size ``1/Σw²``."""
    E = as_ensemble(ens)
    if E.shape[0] < 1:
        raise ValueError("need at least one particle")
    log_w = -np.atleast_1d(obs.neg_log_likelihood(E))
    if not np.isfinite(log_w).any():
        raise NumericalError("all importance weights underflow; the particle filter is fully degenerate")
    log_w = np.where(np.isfinite(log_w), log_w, -np.inf)
    weights = np.exp(log_w - logsumexp(log_w))
    ess = 1.0 / float(np.sum(weights**2))
    logger.info("bootstrap particle filter: ESS %.1f of %d", ess, E.shape[0])
    return weights, ess


def rmse(estimates: Sequence[npt.ArrayLike] | np.ndarray, truth: Sequence[npt.ArrayLike] | np.ndarray) -> float:
    """``√(Σ_n ‖μ̂_n - x_n‖² / (d_x N))``."""
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    ref = np.atleast_2d(np.asarray(truth, dtype=float))
    if est.shape != ref.shape:
        raise ValueError(f"estimates {est.shape} and truth {ref.shape} differ in shape")
    return math.sqrt(float(np.sum((est - ref) ** 2)) / est.size)
