"""
Damped Picard iteration on the coupled system.
"""

import itertools

import numpy as np
import pytest

from src.analysis.rescaling import shift_nodes
from src.core.config import reset_config
from src.core.errors import ConvergenceError, OscillationError
from src.grid.grid import GridSpec, integrate
from src.model.energy import EnergyBreakdown, build_test_pair, continuity_residual
from src.model.problem import PotentialSpec
from src.observability.metrics import get_metrics_collector
from src.solvers.hjb import solve_ergodic
from src.solvers.mfg import aitken_weight, coupling_potential, default_initial_density, minimized_energy, solve_mfg


@pytest.fixture(scope="module")
def coupled_solution():
    from src.model.problem import PotentialKind, ProblemSpec

    spec = ProblemSpec(
        dim=1,
        gamma=2.0,
        alpha=0.5,
        mass=1.0,
        epsilon=1.0,
        potential=PotentialSpec(kind=PotentialKind.SHIFTED_POWER, b=2.0, center=(0.3,)),
        grid=GridSpec(1, 8.0, 129),
        coupling=1.0,
    )
    return solve_mfg(spec)


class TestCoupledSolve:
    """Test invariants of a converged coupled solve."""

    def test_mass_is_conserved(self, coupled_solution):
        assert abs(coupled_solution.mass - 1.0) <= 1e-10

    def test_density_is_nonnegative(self, coupled_solution):
        assert coupled_solution.m.values.min() >= 0.0

    def test_duality_identity(self, coupled_solution):
        assert coupled_solution.duality_gap <= 1e-6

    def test_pair_is_feasible(self, coupled_solution):
        sol = coupled_solution
        assert continuity_residual(sol.spec, sol.pair) == pytest.approx(sol.fp_residual)
        assert sol.fp_residual < 1e-10

    def test_attraction_lowers_the_energy(self, coupled_solution):
        parts = coupled_solution.energy
        assert parts.interaction > 0.0
        assert minimized_energy(coupled_solution) == parts.total

    def test_concentrates_near_the_well(self, coupled_solution):
        grid = coupled_solution.spec.grid
        peak = grid.node(int(np.argmax(coupled_solution.m.flat)))
        assert abs(peak[0] - 0.3) <= grid.spacing

    def test_energy_trace_recorded(self, coupled_solution):
        assert len(coupled_solution.energy_trace) == coupled_solution.outer_iterations


class TestDecoupledSolve:
    """Without interaction the first best response is the fixed point."""

    def test_converges_in_two_sweeps(self, decoupled_1d):
        sol = solve_mfg(decoupled_1d)
        assert sol.outer_iterations <= 2

    def test_lambda_matches_the_bare_hjb(self, decoupled_1d):
        sol = solve_mfg(decoupled_1d)
        bare = solve_ergodic(decoupled_1d, decoupled_1d.potential_field())
        assert sol.lambda_ == pytest.approx(bare.lambda_, abs=1e-6)

    def test_coupling_potential_vanishes(self, decoupled_1d):
        m = default_initial_density(decoupled_1d)
        assert np.all(coupling_potential(decoupled_1d, m).values == 0.0)


class TestFailureModes:
    """Test argument checks and budget exhaustion."""

    @pytest.mark.parametrize("damping", [0.0, 1.5])
    def test_damping_range(self, spec_1d, damping):
        with pytest.raises(ValueError):
            solve_mfg(spec_1d, damping=damping)

    def test_outer_budget(self, spec_1d):
        with pytest.raises(ConvergenceError) as exc:
            solve_mfg(spec_1d, max_outer=1)
        assert integrate(exc.value.iterate) == pytest.approx(1.0, rel=1e-10)
        assert get_metrics_collector().solve_count("mfg", "failed") == 1.0

    def test_initial_density_is_normalized(self, spec_1d):
        assert integrate(default_initial_density(spec_1d)) == pytest.approx(1.0, rel=1e-12)

    def test_user_density_is_renormalized(self, spec_1d):
        start = default_initial_density(spec_1d)
        sol = solve_mfg(spec_1d, init_density=start.with_values(3.0 * start.values))
        assert sol.mass == pytest.approx(1.0, abs=1e-10)

    def test_rising_energy_raises_oscillation(self, spec_1d, mocker):
        """Five consecutive energy increases abort the solve with the current iterate."""
        levels = itertools.count()
        mocker.patch(
            "src.solvers.mfg.evaluate_energy",
            side_effect=lambda spec, pair: EnergyBreakdown.assemble(0.0, float(next(levels)), 0.0),
        )
        with pytest.raises(OscillationError) as exc:
            solve_mfg(spec_1d)
        assert next(levels) == 6
        assert integrate(exc.value.iterate) == pytest.approx(1.0, rel=1e-10)


class TestTranslationCovariance:
    """Without a potential a shifted start gives the shifted solution."""

    def test_shifted_start_shifts_the_solution(self):
        from src.model.problem import ProblemSpec

        grid = GridSpec(1, 12.0, 385)
        spec = ProblemSpec(
            dim=1, gamma=2.0, alpha=0.5, mass=1.0, epsilon=1.0, potential=PotentialSpec(), grid=grid, coupling=4.0
        )
        centered = solve_mfg(spec, init_density=build_test_pair(spec, 1.0, (0.0,)).m)
        # 1.0 is 16 nodes at h = 1/16
        moved = solve_mfg(spec, init_density=build_test_pair(spec, 1.0, (1.0,)).m)
        assert moved.lambda_ == pytest.approx(centered.lambda_, rel=1e-5)
        back = shift_nodes(moved.m, (16,), fill=0.0)
        assert integrate(back.with_values(np.abs(back.values - centered.m.values))) <= 1e-5
        assert grid.node(moved.u.argmin())[0] - grid.node(centered.u.argmin())[0] == pytest.approx(1.0)


class TestAdaptiveRelaxation:
    """Test the Aitken relaxation weight and its use in the outer loop."""

    @staticmethod
    def _steps(ratio: float) -> tuple[np.ndarray, np.ndarray]:
        previous = np.array([0.01, -0.01, 0.02, -0.02])
        return ratio * previous, previous

    def test_geometric_steps_are_extrapolated(self):
        # d_k = r d_(k-1) gives theta / (1 - r)
        step, previous = self._steps(0.5)
        theta = aitken_weight(0.5, step, previous, np.ones(4), np.ones(4), (0.05, 4.0))
        assert theta == pytest.approx(1.0, rel=1e-12)

    def test_weight_is_clipped(self):
        step, previous = self._steps(0.9)
        assert aitken_weight(0.5, step, previous, np.ones(4), np.ones(4), (0.05, 4.0)) == 4.0

    def test_iterate_stays_nonnegative(self):
        step, previous = self._steps(0.9)
        m = np.full(4, 0.01)
        theta = aitken_weight(0.5, step, previous, np.ones(4), m, (0.05, 4.0))
        assert theta <= 1.0 + 1e-12
        assert np.all(m + theta * step >= 0.0)

    def test_adaptive_solve_reaches_the_same_fixed_point(self, spec_1d, monkeypatch):
        reference = solve_mfg(spec_1d)
        monkeypatch.setenv("MFG_ADAPTIVE_AFTER", "2")
        reset_config()
        sol = solve_mfg(spec_1d)
        assert sol.lambda_ == pytest.approx(reference.lambda_, abs=1e-5)
        assert sol.mass == pytest.approx(1.0, abs=1e-10)
        assert sol.duality_gap <= 1e-6
