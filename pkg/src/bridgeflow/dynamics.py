"""Drift models, linear observation models and the homotopy clock.

Every drift model is vectorized over a leading particle axis: calling it
with a ``(d_x,)`` state returns ``f(x)`` with shape ``(d_x,)``, calling it
with a ``(M, d_x)`` ensemble returns one row per particle.  Parameter values
belong to the scenario presets in :mod:`bridgeflow.experiments`, not to the
classes here.

Only linear forward maps ``h(x) = Hx`` are implemented, which makes the
Laplacian of the negative log-likelihood a constant.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
import numpy.typing as npt
import scipy.linalg

logger = logging.getLogger(__name__)


class DriftModel(ABC):
    """Deterministic drift ``f`` of the base diffusion ``dX = f(X)dt + √(2σ) dW``."""

    #: Short identifier used in logs and reports.
    kind: str = ""

    def __init__(self, dim: int) -> None:
        self.dim = dim

    @abstractmethod
    def _evaluate(self, x: np.ndarray) -> np.ndarray:
        """Evaluate on a ``(M, d_x)`` batch."""

    def __call__(self, x: npt.ArrayLike) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != self.dim or x.ndim not in (1, 2):
            raise ValueError(f"{self.kind} drift expects states of dimension {self.dim}, got shape {x.shape}")
        return self._evaluate(np.atleast_2d(x)).reshape(x.shape)

    @property
    def is_linear(self) -> bool:
        return False

    def linear_parts(self) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(F, b)`` for drifts of the form ``Fx + b``."""
        raise TypeError(f"{self.kind} drift is not linear")

    def __repr__(self) -> str:
        return f"{type(self).__name__}(dim={self.dim})"


class ZeroDrift(DriftModel):
    kind = "zero"

    def _evaluate(self, x: np.ndarray) -> np.ndarray:
        return np.zeros_like(x)

    @property
    def is_linear(self) -> bool:
        return True

    def linear_parts(self) -> tuple[np.ndarray, np.ndarray]:
        return np.zeros((self.dim, self.dim)), np.zeros(self.dim)


class LinearDrift(DriftModel):
    """``f(x) = Fx + b``."""

    kind = "linear"

    def __init__(self, F: npt.ArrayLike, b: npt.ArrayLike | None = None) -> None:
        F = np.atleast_2d(np.asarray(F, dtype=float))
        if F.shape[0] != F.shape[1]:
            raise ValueError(f"F must be square, got shape {F.shape}")
        super().__init__(F.shape[0])
        self.F = F
        self.b = np.zeros(self.dim) if b is None else np.asarray(b, dtype=float).reshape(self.dim)

    def _evaluate(self, x: np.ndarray) -> np.ndarray:
        return x @ self.F.T + self.b

    @property
    def is_linear(self) -> bool:
        return True

    def linear_parts(self) -> tuple[np.ndarray, np.ndarray]:
        return self.F, self.b

    def __repr__(self) -> str:
        return f"LinearDrift(F={self.F.tolist()}, b={self.b.tolist()})"


class DoubleWellDrift(DriftModel):
    """Gradient flow ``f = -∇V`` of a double well slaved to the parabola ``x₂ = 2 - βx₁²``.

    ``V(x) = (λ₁/2)(x₂ - 2 + βx₁²)² + (λ₂/2)(x₁⁴/2 - x₁²)``.
    """

    kind = "double-well"

    def __init__(self, lambda1: float, lambda2: float, beta: float) -> None:
        if min(lambda1, lambda2, beta) <= 0:
            raise ValueError("double-well parameters must be positive")
        super().__init__(2)
        self.lambda1 = float(lambda1)
        self.lambda2 = float(lambda2)
        self.beta = float(beta)

    def _offset(self, x: np.ndarray) -> np.ndarray:
        return x[..., 1] - 2.0 + self.beta * x[..., 0] ** 2

    def potential(self, x: npt.ArrayLike) -> np.ndarray | float:
        """Evaluate ``V`` at a state or a batch of states."""
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != 2:
            raise ValueError(f"double-well potential is defined for d_x = 2, got shape {x.shape}")
        x1 = x[..., 0]
        value = 0.5 * self.lambda1 * self._offset(x) ** 2 + 0.5 * self.lambda2 * (0.5 * x1**4 - x1**2)
        return float(value) if x.ndim == 1 else value

    def _evaluate(self, x: np.ndarray) -> np.ndarray:
        x1 = x[:, 0]
        q = self._offset(x)
        dv1 = 2.0 * self.beta * self.lambda1 * x1 * q + self.lambda2 * (x1**3 - x1)
        dv2 = self.lambda1 * q
        return -np.column_stack([dv1, dv2])

    def __repr__(self) -> str:
        return f"DoubleWellDrift(lambda1={self.lambda1}, lambda2={self.lambda2}, beta={self.beta})"


class Lorenz63Drift(DriftModel):
    """``f(x, y, z) = (a(y - x), x(b - z) - y, xy - cz)``."""

    kind = "lorenz63"

    def __init__(self, a: float = 10.0, b: float = 28.0, c: float = 8.0 / 3.0) -> None:
        super().__init__(3)
        self.a = float(a)
        self.b = float(b)
        self.c = float(c)

    def _evaluate(self, x: np.ndarray) -> np.ndarray:
        x0, x1, x2 = x[:, 0], x[:, 1], x[:, 2]
        return np.column_stack(
            [
                self.a * (x1 - x0),
                x0 * (self.b - x2) - x1,
                x0 * x1 - self.c * x2,
            ]
        )

    def __repr__(self) -> str:
        return f"Lorenz63Drift(a={self.a}, b={self.b}, c={self.c})"


def eval_drift(model: DriftModel, x: npt.ArrayLike) -> np.ndarray:
    """Evaluate ``f(x)``; raises ``ValueError`` on a dimension mismatch."""
    return model(x)


def double_well_potential(model: DoubleWellDrift, x: npt.ArrayLike) -> np.ndarray | float:
    """Evaluate the double-well potential ``V(x)``."""
    return model.potential(x)


@dataclass(frozen=True)
class ObservationModel:
    """Linear forward map ``h(x) = Hx`` with Gaussian noise ``N(0, R)`` and observed value ``y``.

    ``R`` is validated symmetric positive definite by its Cholesky
    factorization, which is computed once and cached together with ``R⁻¹``.
    """

    H: np.ndarray
    R: np.ndarray
    y: np.ndarray
    R_inv: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        R = np.atleast_2d(np.asarray(self.R, dtype=float))
        y = np.atleast_1d(np.asarray(self.y, dtype=float))
        d_y = H.shape[0]
        if R.shape != (d_y, d_y) or y.shape != (d_y,):
            raise ValueError(f"inconsistent observation shapes: H {H.shape}, R {R.shape}, y {y.shape}")
        if not np.allclose(R, R.T, rtol=1e-12, atol=0.0):
            raise ValueError("R must be symmetric")
        try:
            factor = scipy.linalg.cho_factor(R)
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"R must be symmetric positive definite: {exc}") from exc
        R_inv = scipy.linalg.cho_solve(factor, np.eye(d_y))
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "R_inv", 0.5 * (R_inv + R_inv.T))

    @property
    def state_dim(self) -> int:
        return self.H.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.H.shape[0]

    @property
    def hessian(self) -> np.ndarray:
        """Constant Hessian ``HᵀR⁻¹H`` of the negative log-likelihood (its trace is ΔL)."""
        return self.H.T @ self.R_inv @ self.H

    def with_observation(self, y: npt.ArrayLike) -> ObservationModel:
        return ObservationModel(H=self.H, R=self.R, y=y)

    def with_noise_scaled(self, factor: float) -> ObservationModel:
        return ObservationModel(H=self.H, R=self.R * factor, y=self.y)

    def _check(self, x: np.ndarray) -> None:
        if x.shape[-1] != self.state_dim or x.ndim not in (1, 2):
            raise ValueError(f"observation model expects states of dimension {self.state_dim}, got shape {x.shape}")

    def forward(self, x: npt.ArrayLike) -> np.ndarray:
        """``h(x) = Hx`` for a state or a ``(M, d_x)`` batch."""
        x = np.asarray(x, dtype=float)
        self._check(x)
        return x @ self.H.T

    def neg_log_likelihood(self, x: npt.ArrayLike) -> np.ndarray | float:
        """``L(x) = ½ (Hx - y)ᵀ R⁻¹ (Hx - y)``."""
        residual = self.forward(x) - self.y
        value = 0.5 * np.einsum("...i,ij,...j->...", residual, self.R_inv, residual)
        return float(value) if np.ndim(value) == 0 else value

    def grad_neg_log_likelihood(self, x: npt.ArrayLike) -> np.ndarray:
        """``∇L(x) = HᵀR⁻¹(Hx - y)``."""
        residual = self.forward(x) - self.y
        return residual @ self.R_inv @ self.H


def neg_log_likelihood(obs: ObservationModel, x: npt.ArrayLike) -> np.ndarray | float:
    return obs.neg_log_likelihood(x)


def grad_neg_log_likelihood(obs: ObservationModel, x: npt.ArrayLike) -> np.ndarray:
    return obs.grad_neg_log_likelihood(x)


@dataclass(frozen=True)
class HomotopyClock:
    """Homotopy time ``t ∈ [0, T]`` and the length ``dt`` of the step that starts at ``t``."""

    t: float
    T: float
    dt: float

    def __post_init__(self) -> None:
        if self.T <= 0:
            raise ValueError(f"window length must be positive, got T={self.T}")
        if not 0.0 <= self.t <= self.T * (1 + 1e-12):
            raise ValueError(f"homotopy time {self.t} outside [0, {self.T}]")
        if self.dt <= 0 or self.dt > self.T * (1 + 1e-12):
            raise ValueError(f"step must satisfy 0 < dt <= T, got dt={self.dt}, T={self.T}")
