"""
Shared fixtures: small 1D problems that solve in well under a second.
"""

import pytest

from src.core.config import reset_config
from src.grid.grid import GridSpec
from src.model.problem import PotentialKind, PotentialSpec, ProblemSpec
from src.observability.metrics import reset_metrics_collector


@pytest.fixture(autouse=True)
def fresh_singletons():
    """Every test sees default settings and an empty metrics registry."""
    reset_config()
    reset_metrics_collector()
    yield
    reset_config()
    reset_metrics_collector()


@pytest.fixture
def grid_1d():
    return GridSpec(dim=1, half_width=8.0, points_per_axis=129)


@pytest.fixture
def fine_grid_1d():
    return GridSpec(dim=1, half_width=8.0, points_per_axis=257)


@pytest.fixture
def grid_2d():
    return GridSpec(dim=2, half_width=4.0, points_per_axis=17)


@pytest.fixture
def shifted_well():
    return PotentialSpec(kind=PotentialKind.SHIFTED_POWER, b=2.0, center=(0.3,))


@pytest.fixture
def harmonic():
    return PotentialSpec(kind=PotentialKind.POWER, b=2.0, center=(0.0,))


@pytest.fixture
def spec_1d(grid_1d, shifted_well):
    """gamma = 2, alpha = 1/2, unit mass and viscosity, attractive coupling."""
    return ProblemSpec(
        dim=1, gamma=2.0, alpha=0.5, mass=1.0, epsilon=1.0, potential=shifted_well, grid=grid_1d, coupling=1.0
    )


@pytest.fixture
def decoupled_1d(spec_1d):
    return spec_1d.with_changes(coupling=0.0)


@pytest.fixture
def harmonic_1d(fine_grid_1d, harmonic):
    """-2 v'' + x^2 v = lambda v after Hopf-Cole; lambda -> sqrt(2)."""
    return ProblemSpec(
        dim=1, gamma=2.0, alpha=0.5, mass=1.0, epsilon=1.0, potential=harmonic, grid=fine_grid_1d, coupling=0.0
    )
