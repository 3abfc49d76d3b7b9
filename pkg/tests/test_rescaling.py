"""
Frame changes between original and rescaled coordinates.
"""

from types import SimpleNamespace

import numpy as np
import pytest

from src.analysis.rescaling import (
    exponents,
    frame_residual,
    locate_argmin_translation,
    recenter,
    rescale_solution,
    rescaled_potential,
    rescaled_spec,
    scale_exponents,
    shift_nodes,
    solution_from_fields,
    unrescale_solution,
)
from src.core.errors import BoxTooSmallError, SpecValidationError
from src.grid.grid import GridSpec, ScalarField, integrate
from src.model.problem import PotentialKind, PotentialSpec
from src.solvers.mfg import solve_mfg


@pytest.fixture(scope="module")
def viscous_solution():
    """Decoupled solve at eps = 1/2 on a grid fine enough for the concentrated profile."""
    from src.model.problem import ProblemSpec

    spec = ProblemSpec(
        dim=1,
        gamma=2.0,
        alpha=0.5,
        mass=1.0,
        epsilon=0.5,
        potential=PotentialSpec(kind=PotentialKind.SHIFTED_POWER, b=2.0, center=(0.3,)),
        grid=GridSpec(1, 8.0, 257),
        coupling=0.0,
    )
    return solve_mfg(spec)


class TestExponents:
    """Test the scaling exponents."""

    def test_quadratic_case(self):
        exp = scale_exponents(1, 2.0, 0.5)
        assert exp.space == pytest.approx(4.0 / 3.0)
        assert exp.value == pytest.approx(2.0 / 3.0)
        assert exp.density == pytest.approx(4.0 / 3.0)
        assert exp.u_exponent == pytest.approx(-1.0)

    def test_cubic_hamiltonian(self):
        exp = scale_exponents(1, 3.0, 0.7)
        assert exp.space == pytest.approx(1.25)
        assert exp.value == pytest.approx(0.375)
        assert exp.u_exponent == pytest.approx(-1.125)

    def test_density_exponent_conserves_mass(self):
        exp = scale_exponents(2, 2.0, 1.2)
        assert exp.density == pytest.approx(2.0 * exp.space)

    def test_no_concentration_scale(self):
        with pytest.raises(SpecValidationError):
            scale_exponents(1, 2.0, -1.0)

    def test_length(self):
        assert scale_exponents(1, 2.0, 0.5).length(0.125) == pytest.approx(0.125 ** (4.0 / 3.0))


class TestRescaledProblem:
    """Test the unit-viscosity frame problem."""

    def test_unit_epsilon_frame_reproduces_potential(self, spec_1d):
        frame = rescaled_spec(spec_1d, 1.0)
        assert frame.epsilon == 1.0
        assert frame.potential.kind is PotentialKind.CUSTOM_TABLE
        assert np.array_equal(frame.potential_field().values, spec_1d.potential_field().values)
        assert frame.coupling == spec_1d.coupling

    def test_power_potential_scaling(self, spec_1d):
        spec = spec_1d.with_changes(potential=PotentialSpec(kind=PotentialKind.POWER, b=2.0))
        y = np.array([[0.5], [2.0]])
        eps = 0.25
        exp = exponents(spec)
        expected = eps**exp.value * (eps**exp.space * y[:, 0]) ** 2
        assert np.allclose(rescaled_potential(spec, y, eps), expected, rtol=1e-14)

    def test_origin_moves_the_frame(self, spec_1d):
        values = rescaled_potential(spec_1d, np.array([[0.0]]), 0.5, origin=(0.3,))
        assert values[0] == pytest.approx(0.0, abs=1e-15)

    def test_zero_potential_stays_zero(self, spec_1d):
        spec = spec_1d.with_changes(potential=PotentialSpec())
        assert rescaled_spec(spec, 0.1).potential.kind is PotentialKind.ZERO


class TestRescaleSolution:
    """Test moving solutions between frames."""

    def test_unit_epsilon_is_the_identity(self, decoupled_1d):
        sol = solve_mfg(decoupled_1d)
        frame = rescale_solution(sol, decoupled_1d.grid)
        assert np.allclose(frame.m.values, sol.m.values, rtol=0.0, atol=1e-12 * sol.m.values.max())
        assert np.allclose(frame.u.values, sol.u.values, rtol=0.0, atol=1e-10 * (1.0 + sol.u.values.max()))
        assert frame.lambda_ == sol.lambda_

    def test_mass_and_lambda_scaling(self, viscous_solution):
        sol = viscous_solution
        target = GridSpec(1, 12.0, 385)
        frame = rescale_solution(sol, target, origin=(0.3,))
        exp = exponents(sol.spec)
        assert integrate(frame.m) == pytest.approx(1.0, rel=1e-4)
        assert frame.lambda_ == pytest.approx(0.5**exp.value * sol.lambda_, rel=1e-14)
        assert frame.spec.epsilon == 1.0
        assert frame.epsilon == 0.5

    def test_round_trip(self, viscous_solution):
        sol = viscous_solution
        frame = rescale_solution(sol, GridSpec(1, 12.0, 385), origin=(0.3,))
        back = unrescale_solution(frame, sol.spec, origin=(0.3,))
        l1 = integrate(sol.m.with_values(np.abs(back.m.values - sol.m.values)))
        assert l1 <= 1e-3
        assert back.lambda_ == pytest.approx(sol.lambda_, rel=1e-12)

    def test_box_too_small(self, viscous_solution):
        # the frame box covers only |x - 0.3| <= 0.4, where the density is far from negligible
        with pytest.raises(BoxTooSmallError):
            rescale_solution(viscous_solution, GridSpec(1, 1.0, 65), origin=(0.3,))


class TestTranslation:
    """Test argmin location and recentering."""

    def test_boundary_minimum_is_refused(self, grid_1d):
        u = ScalarField(grid_1d, grid_1d.axis)
        with pytest.raises(BoxTooSmallError):
            locate_argmin_translation(SimpleNamespace(u=u))

    def test_shift_nodes(self):
        grid = GridSpec(1, 1.0, 17)
        f = ScalarField(grid, np.arange(17.0))
        g = shift_nodes(f, (2,), fill=-1.0)
        assert np.array_equal(g.values[:15], np.arange(2.0, 17.0))
        assert np.all(g.values[15:] == -1.0)
        assert np.all(shift_nodes(f, (40,), fill=0.0).values == 0.0)

    def test_recenter_moves_the_minimum_to_the_origin(self, decoupled_1d):
        sol = solve_mfg(decoupled_1d)
        centered, y_eps = recenter(sol)
        grid = decoupled_1d.grid
        assert np.allclose(y_eps, grid.node(sol.u.argmin()))
        assert centered.u.argmin() == (64,)
        assert centered.u.values[64] == 0.0
        assert centered.spec.potential.center[0] == pytest.approx(0.3 - y_eps[0])
        assert integrate(centered.m) == pytest.approx(1.0, rel=1e-8)

    def test_recenter_needs_an_origin_node(self, decoupled_1d):
        spec = decoupled_1d.with_changes(grid=GridSpec(1, 8.0, 128))
        with pytest.raises(SpecValidationError):
            recenter(solve_mfg(spec))


class TestStoredFields:
    """Test rebuilding a solution from (u, m)."""

    def test_lambda_is_recovered(self, decoupled_1d):
        sol = solve_mfg(decoupled_1d)
        rebuilt = solution_from_fields(decoupled_1d, sol.u, sol.m)
        assert rebuilt.lambda_ == pytest.approx(sol.lambda_, abs=1e-6)
        hjb, continuity = frame_residual(rebuilt)
        assert hjb < 1e-6
        assert continuity < 1e-8
