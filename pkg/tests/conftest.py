import numpy as np
import pytest

from bridgeflow.dynamics import ObservationModel


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


@pytest.fixture
def scalar_obs() -> ObservationModel:
    """``H = 1``, ``R = 0.01``, ``y = 1``."""
    return ObservationModel(H=np.array([[1.0]]), R=np.array([[0.01]]), y=np.array([1.0]))


@pytest.fixture
def first_component_obs() -> ObservationModel:
    """Observe the first of two components: ``H = (1 0)``, ``R = 0.01``, ``y = 2.5``."""
    return ObservationModel(H=np.array([[1.0, 0.0]]), R=np.array([[0.01]]), y=np.array([2.5]))


@pytest.fixture
def gaussian_ensemble(rng: np.random.Generator) -> np.ndarray:
    """500 draws around ``(1, 3)`` with covariance ``0.02 I``."""
    return np.array([1.0, 3.0]) + np.sqrt(0.02) * rng.standard_normal((500, 2))


@pytest.fixture
def _isolated_out_dir(tmp_path, monkeypatch):
    """Point the default output directory at a temporary path."""
    monkeypatch.setenv("BRIDGEFLOW_OUT_DIR", str(tmp_path / "default-out"))
