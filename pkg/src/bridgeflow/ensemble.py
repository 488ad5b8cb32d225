"""Ensemble storage conventions and empirical statistics.

An ensemble is a ``(M, d_x)`` float array, one particle per row.  It is the
empirical representation of the homotopy density: every expectation
``π_t^h[g]`` used by the control laws is an equally weighted average over the
rows, i.e. the empirical measure carries weight ``1/M`` per particle.

All functions here are pure.  Reductions run over the particle axis in array
order, so results do not depend on how callers schedule work.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import numpy.typing as npt
import scipy.linalg

from bridgeflow.errors import NumericalError

logger = logging.getLogger(__name__)

#: ``(M, d_x)`` array of particles.
Ensemble = npt.NDArray[np.float64]

#: Relative factor for the default score regularization.
SCORE_REG_FACTOR = 1e-8

#: Condition number above which a regularized covariance counts as singular.
MAX_CONDITION = 1e12


@dataclass(frozen=True)
class EnsembleStats:
    """Mean and covariance of one ensemble snapshot."""

    mean: np.ndarray
    cov: np.ndarray

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class GaussianBelief:
    """A Gaussian N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def sample(self, size: int, rng: np.random.Generator) -> Ensemble:
        """Draw *size* particles (rows) from the Gaussian."""
        return rng.multivariate_normal(self.mean, self.cov, size=size, method="eigh")


def as_ensemble(ens: npt.ArrayLike) -> Ensemble:
    """Return *ens* as a 2-D float array, promoting a 1-D array of scalars to ``(M, 1)``."""
    arr = np.asarray(ens, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"ensemble must be a (M, d_x) array, got shape {arr.shape}")
    return arr


def symmetrize(matrix: np.ndarray) -> np.ndarray:
    """Return ``(A + Aᵀ)/2``."""
    return 0.5 * (matrix + matrix.T)


def ensemble_mean(ens: npt.ArrayLike) -> np.ndarray:
    """Arithmetic mean over particles."""
    arr = as_ensemble(ens)
    if arr.shape[0] == 0:
        raise ValueError("cannot take the mean of an empty ensemble")
    return arr.sum(axis=0) / arr.shape[0]


def _require_spread(arr: Ensemble) -> None:
    if arr.shape[0] < 2:
        raise ValueError(f"covariance statistics need at least 2 particles, got {arr.shape[0]}")


def ensemble_covariance(ens: npt.ArrayLike) -> np.ndarray:
    """Unbiased sample covariance (divisor ``M - 1``), symmetrized."""
    arr = as_ensemble(ens)
    _require_spread(arr)
    anomalies = arr - ensemble_mean(arr)
    return symmetrize(anomalies.T @ anomalies / (arr.shape[0] - 1))


def cross_covariance(ens: npt.ArrayLike, values: npt.ArrayLike) -> np.ndarray:
    """Cross-covariance ``(1/(M-1)) Σ_i (x_i - x̄)(v_i - v̄)ᵀ`` as a ``(d_x, d_v)`` matrix.

    *values* holds one vector per particle, aligned with the ensemble rows.
    """
    arr = as_ensemble(ens)
    vals = as_ensemble(values)
    if vals.shape[0] != arr.shape[0]:
        raise ValueError(f"got {vals.shape[0]} values for {arr.shape[0]} particles")
    _require_spread(arr)
    x_anom = arr - ensemble_mean(arr)
    v_anom = vals - ensemble_mean(vals)
    return x_anom.T @ v_anom / (arr.shape[0] - 1)


def ensemble_stats(ens: npt.ArrayLike) -> EnsembleStats:
    """Mean and covariance of *ens* in one call."""
    arr = as_ensemble(ens)
    return EnsembleStats(mean=ensemble_mean(arr), cov=ensemble_covariance(arr))


def weighted_moments(ens: npt.ArrayLike, weights: npt.ArrayLike) -> GaussianBelief:
    """Weighted mean and covariance (weights are normalized to sum to one)."""
    arr = as_ensemble(ens)
    w = np.asarray(weights, dtype=float)
    if w.shape != (arr.shape[0],):
        raise ValueError(f"got {w.shape} weights for {arr.shape[0]} particles")
    if np.any(w < 0) or not np.isfinite(w).all() or w.sum() <= 0:
        raise ValueError("weights must be finite, non-negative and not all zero")
    w = w / w.sum()
    mean = w @ arr
    anomalies = arr - mean
    cov = symmetrize((anomalies * w[:, None]).T @ anomalies)
    return GaussianBelief(mean=mean, cov=cov)


def default_score_reg(cov: np.ndarray) -> float:
    """Default regularization ``1e-8 * max(1, trace(Σ)/d_x)``."""
    dim = cov.shape[0]
    return SCORE_REG_FACTOR * max(1.0, float(np.trace(cov)) / dim)


def require_well_conditioned(matrix: np.ndarray, what: str) -> float:
    """Condition number of *matrix*; raises :class:`NumericalError` if it has non-finite entries or is near-singular."""
    if not np.isfinite(matrix).all():
        raise NumericalError(f"{what} has non-finite entries")
    cond = float(np.linalg.cond(matrix))
    if not np.isfinite(cond) or cond > MAX_CONDITION:
        raise NumericalError(f"{what} is singular (condition number estimate {cond:.3e})")
    return cond


def _regularized_solve(matrix: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    """Solve ``matrix @ z = rhs`` for a symmetric matrix, refusing near-singular systems."""
    require_well_conditioned(matrix, what)
    return scipy.linalg.solve(matrix, rhs, assume_a="sym")


def gaussian_score(stats: EnsembleStats, x: npt.ArrayLike, reg: float | None = None) -> np.ndarray:
    """Gaussian approximation of the score, ``-(Σ + reg·I)⁻¹ (x - μ)``.

    *x* is a single state ``(d_x,)`` or a batch ``(M, d_x)``; the result has
    the same shape.  ``reg=None`` selects :func:`default_score_reg`.
    """
    x = np.asarray(x, dtype=float)
    if reg is None:
        reg = default_score_reg(stats.cov)
    matrix = stats.cov + reg * np.eye(stats.dim)
    deviation = np.atleast_2d(x - stats.mean)
    score = -_regularized_solve(matrix, deviation.T, "regularized covariance").T
    return score.reshape(x.shape)


def statistical_linearization(ens: npt.ArrayLike, values: npt.ArrayLike, reg: float = 0.0) -> np.ndarray:
    """Ensemble estimate of the Jacobian of a map from its values at the particles.

    Uses the Stein identity ``Σ^{xx} E[∇h] = Σ^{xh}``: returns
    ``((Σ^{xx} + reg·I)⁻¹ Σ^{xh})ᵀ`` with shape ``(d_y, d_x)``.  Exact for
    linear maps; for Gaussian ensembles it is the ensemble average of the
    Jacobian.
    """
    arr = as_ensemble(ens)
    cov = ensemble_covariance(arr)
    cross = cross_covariance(arr, values)
    matrix = cov + reg * np.eye(cov.shape[0])
    return _regularized_solve(matrix, cross, "ensemble covariance").T
