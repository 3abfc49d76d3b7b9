"""
Ergodic HJB solver: harmonic oracle, normalization and covariance.
"""

import numpy as np
import pytest

from src.analysis.sweep import richardson
from src.core.errors import ConvergenceError
from src.grid.grid import GridSpec, ScalarField
from src.solvers.hjb import hjb_residual, monotone_policy, optimal_drift, solve_ergodic

SQRT2 = np.sqrt(2.0)


def _quadratic(grid: GridSpec) -> ScalarField:
    return ScalarField(grid, grid.axis**2, name="f")


def _harmonic_lambda(spec, points: int) -> float:
    grid = GridSpec(1, 8.0, points)
    return solve_ergodic(spec.with_changes(grid=grid), _quadratic(grid)).lambda_


class TestHarmonicOracle:
    """-eps u'' + u'^2 / 2 + lambda = x^2 has lambda = sqrt(2) at eps = 1."""

    def test_first_order_convergence(self, harmonic_1d):
        coarse = abs(_harmonic_lambda(harmonic_1d, 129) - SQRT2)
        fine = abs(_harmonic_lambda(harmonic_1d, 257) - SQRT2)
        assert fine < coarse
        assert fine < 0.1

    def test_richardson_improves_the_estimate(self, harmonic_1d):
        coarse = _harmonic_lambda(harmonic_1d, 257)
        fine = _harmonic_lambda(harmonic_1d, 513)
        assert abs(richardson(coarse, fine) - SQRT2) < 0.5 * abs(fine - SQRT2)


class TestSolution:
    """Test properties of a converged solve."""

    def test_residual_and_normalization(self, harmonic_1d):
        f = _quadratic(harmonic_1d.grid)
        sol = solve_ergodic(harmonic_1d, f)
        assert sol.u.values.min() == 0.0
        assert hjb_residual(harmonic_1d, sol.u, sol.lambda_, f) <= 1e-9 * (1.0 + np.ptp(f.values))
        assert sol.residual == pytest.approx(hjb_residual(harmonic_1d, sol.u, sol.lambda_, f))

    def test_minimum_sits_at_the_well(self, harmonic_1d):
        sol = solve_ergodic(harmonic_1d, _quadratic(harmonic_1d.grid))
        assert sol.u.argmin() == (128,)

    def test_policy_signs(self, harmonic_1d):
        sol = solve_ergodic(harmonic_1d, _quadratic(harmonic_1d.grid))
        assert np.all(sol.policy.backward >= 0.0)
        assert np.all(sol.policy.forward <= 0.0)

    def test_shift_covariance(self, harmonic_1d):
        """f + c shifts lambda by c and leaves u unchanged."""
        f = _quadratic(harmonic_1d.grid)
        base = solve_ergodic(harmonic_1d, f)
        moved = solve_ergodic(harmonic_1d, f.with_values(f.values + 1.7))
        assert moved.lambda_ - base.lambda_ == pytest.approx(1.7, abs=1e-9)
        assert np.max(np.abs(moved.u.values - base.u.values)) < 1e-9 * (1.0 + base.u.values.max())

    def test_lambda_is_monotone_in_the_forcing(self, harmonic_1d):
        """A larger right-hand side gives a larger ergodic constant."""
        f = _quadratic(harmonic_1d.grid)
        bumped = f.with_values(f.values + 0.5 * np.exp(-harmonic_1d.grid.axis**2))
        assert solve_ergodic(harmonic_1d, bumped).lambda_ > solve_ergodic(harmonic_1d, f).lambda_

    def test_drift_points_downhill(self, harmonic_1d):
        sol = solve_ergodic(harmonic_1d, _quadratic(harmonic_1d.grid))
        drift = optimal_drift(harmonic_1d, sol.u).components[0]
        x = harmonic_1d.grid.axis
        assert np.all(drift[x > 0.5] < 0.0)
        assert np.all(drift[x < -0.5] > 0.0)

    def test_budget_exhausted(self, harmonic_1d):
        with pytest.raises(ConvergenceError) as exc:
            solve_ergodic(harmonic_1d, _quadratic(harmonic_1d.grid), max_iters=1)
        u, lam = exc.value.iterate
        assert u.grid == harmonic_1d.grid
        assert exc.value.residual > 0


class TestMonotoneHamiltonian:
    """Test the upwind Hamiltonian."""

    def test_linear_profile(self, harmonic_1d):
        grid = harmonic_1d.grid
        ham, policy = monotone_policy(harmonic_1d, ScalarField(grid, 2.0 * grid.axis))
        # slope 2 through the backward slot except on the first node
        assert np.allclose(ham[1:], 2.0)
        assert ham[0] == 0.0
        assert np.allclose(policy.backward[0, 1:], 2.0)
        assert np.all(policy.forward == 0.0)

    def test_p_laplacian_exponent(self, harmonic_1d):
        spec = harmonic_1d.with_changes(gamma=3.0)
        grid = spec.grid
        ham, policy = monotone_policy(spec, ScalarField(grid, 2.0 * grid.axis))
        assert np.allclose(ham[1:], 2.0**3 / 3.0)
        # control |p|^(g-2) p
        assert np.allclose(policy.backward[0, 1:], 4.0)
