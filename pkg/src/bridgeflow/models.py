"""Pydantic models for bridgeflow configuration and result records."""

from __future__ import annotations

from typing import Literal

from pydantic import BaseModel, ConfigDict, Field

Scheme = Literal["euler", "robust", "meanfield"]
Law = Literal["generic", "pure-diffusion", "pure-drift", "linear-gaussian", "none"]
Gradient = Literal["analytic", "stein"]
Method = Literal["homotopy", "esrf"]


class AssimilationConfig(BaseModel):
    """Numerical settings for one homotopy window (or one assimilation cycle)."""

    model_config = ConfigDict(extra="forbid")

    #: Window length ``T``.
    T: float = Field(1.0, gt=0)
    #: Integrator step ``Δt``; also the ``Δt`` inside the modified forward map.
    dt: float = Field(0.005, gt=0)
    #: Diffusion constant ``σ``.
    sigma: float = Field(0.0, ge=0)
    #: Multiplicative inflation factor ``σ_k`` (extra drift ``σ_k (x - μ̂)``).
    inflation: float = Field(0.0, ge=0)
    seed: int = Field(0, ge=0)
    scheme: Scheme = "euler"
    #: Heun predictor-corrector on top of the euler or meanfield step.
    corrector: bool = False
    law: Law = "generic"
    gradient: Gradient = "analytic"
    #: Multiplies the data-driven part of the drift.  Anything but 1 is a
    #: deliberately wrong control, used as a negative control by the validator.
    control_scale: float = 1.0
    #: Covariance regularization for score evaluations (``None``: relative default).
    score_reg: float | None = Field(None, ge=0)


class RunConfig(BaseModel):
    """Resolved configuration of a ``bridgeflow scenario`` run."""

    model_config = ConfigDict(extra="forbid")

    scenario: str = "pure-diffusion"
    method: Method = "homotopy"
    #: Ensemble size; ``None`` keeps the scenario default.
    particles: int | None = Field(None, ge=2)
    dt: float | None = Field(None, gt=0)
    #: Window length ``T`` of single-window scenarios.
    window: float | None = Field(None, gt=0)
    #: Observation interval of cycled scenarios (the window of each cycle).
    dtobs: float | None = Field(None, gt=0)
    cycles: int | None = Field(None, ge=1)
    inflation: float | None = Field(None, ge=0)
    seed: int = Field(42, ge=0)
    scheme: Scheme | None = None
    corrector: bool | None = None
    #: Run the uncontrolled prior flow instead of the homotopy.
    controls: bool = True
    #: Homotopy times at which particle snapshots are written (``None``: 0 and T).
    snapshot_times: list[float] | None = None
    write_particles: bool = True
    emit_plot_script: bool = False
    out: str = "bridgeflow-out"


class SweepConfig(BaseModel):
    """Grid for ``bridgeflow sweep`` (defaults reproduce the Lorenz-63 table grid)."""

    model_config = ConfigDict(extra="forbid")

    scenario: str = "lorenz63"
    methods: list[Method] = ["esrf", "homotopy"]
    ensembles: list[int] = [5, 10, 15]
    dtobs_values: list[float] = [0.05, 0.1, 0.12]
    inflations: list[float] = [round(0.025 * k, 3) for k in range(10)]
    cycles: int = Field(2000, ge=1)
    dt: float = Field(0.005, gt=0)
    seed: int = Field(42, ge=0)
    workers: int = Field(1, ge=1)
    out: str = "bridgeflow-out"


class SweepCell(BaseModel):
    """One grid point of a sweep; ``rmse`` is ``None`` when the run failed."""

    method: Method
    M: int
    dtobs: float
    inflation: float
    rmse: float | None = None
    error: str | None = None


class CheckResult(BaseModel):
    """Outcome of one validation check."""

    name: str
    passed: bool
    detail: str = ""
