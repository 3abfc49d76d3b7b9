"""
Vanishing-viscosity ladder, scaling fits and the concentration report.
"""

import numpy as np
import pytest

from src.analysis.sweep import (
    ScalingQuantity,
    SweepRecord,
    ball_mass,
    candidate_origins,
    concentration_report,
    fit_scaling_exponent,
    geometric_ladder,
    richardson,
    richardson_table,
    run_sweep,
    subadditivity_probe,
    tail_fit,
    target_slope,
    warm_start,
)
from src.core.errors import NonCauchyError, SpecValidationError
from src.grid.grid import GridSpec, ScalarField, integrate
from src.model.energy import EnergyBreakdown
from src.model.problem import PotentialKind, PotentialSpec, ProblemSpec, Well


def make_record(epsilon: float, value: float = -1.0, point: tuple[float, ...] = (0.3,)) -> SweepRecord:
    parts = EnergyBreakdown.assemble(0.5, 0.0, -2.0 * value + 1.0)
    return SweepRecord(
        epsilon=epsilon,
        lambda_=value,
        lambda_rescaled=value,
        energy_total=value,
        energy_parts=parts,
        concentration_point=point,
        mass_in_ball=1.0,
        y_eps_scaled=float(np.linalg.norm(point)),
        sup_m_rescaled=1.0,
        tail_slope=-1.0,
        tail_r_squared=1.0,
    )


@pytest.fixture(scope="module")
def short_sweep():
    """Three rungs of the coupled problem on a coarse frame grid."""
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
    return spec, run_sweep(spec, geometric_ladder(1.0, 3))


def _two_well(flat_center: float) -> ProblemSpec:
    """V = |x + 1|^b1 |x - 1|^b2 with the quartic (flatter) factor at flat_center."""
    wells = tuple(Well((c,), 4.0 if c == flat_center else 2.0) for c in (-1.0, 1.0))
    return ProblemSpec(
        dim=1,
        gamma=2.0,
        alpha=0.5,
        mass=1.0,
        epsilon=1.0,
        potential=PotentialSpec(kind=PotentialKind.MULTI_WELL, wells=wells),
        grid=GridSpec(1, 8.0, 257),
        coupling=1.0,
    )


@pytest.fixture
def two_well_spec():
    return _two_well(1.0)


class TestLadder:
    """Test ladder construction and validation."""

    def test_geometric_ladder(self):
        assert geometric_ladder(1.0, 4) == [1.0, 0.5, 0.25, 0.125]

    @pytest.mark.parametrize("eps0,rungs", [(0.0, 3), (1.0, 0)])
    def test_invalid_ladder(self, eps0, rungs):
        with pytest.raises(SpecValidationError):
            geometric_ladder(eps0, rungs)

    def test_increasing_ladder_rejected(self, spec_1d):
        with pytest.raises(SpecValidationError):
            run_sweep(spec_1d, [0.5, 1.0])

    def test_bad_ball(self, spec_1d):
        with pytest.raises(SpecValidationError):
            run_sweep(spec_1d, [1.0], radius=0.0)


class TestRunSweep:
    """Test a short coupled sweep."""

    def test_all_rungs_complete(self, short_sweep):
        _, result = short_sweep
        assert result.completed
        assert len(result) == 3
        assert [r.epsilon for r in result] == [1.0, 0.5, 0.25]

    def test_first_frame_is_anchored_at_the_origin(self, short_sweep):
        _, result = short_sweep
        assert result.origins[0] == (0.0,)

    def test_frames_follow_measured_points(self, short_sweep):
        """Each frame sits on the previous rung's concentration point, not on the well."""
        _, result = short_sweep
        for record, origin in zip(result.records[:-1], result.origins[1:]):
            assert origin == record.concentration_point

    def test_lambda_is_unscaled_from_the_frame(self, short_sweep):
        spec, result = short_sweep
        for record in result:
            assert record.lambda_ == pytest.approx(record.epsilon ** (-2.0 / 3.0) * record.lambda_rescaled, rel=1e-12)

    def test_rescaled_mass_is_conserved(self, short_sweep):
        _, result = short_sweep
        for sol in result.solutions:
            assert sol.mass == pytest.approx(1.0, abs=1e-10)
            assert sol.spec.epsilon == 1.0

    def test_concentration_points_approach_the_well(self, short_sweep):
        _, result = short_sweep
        distances = [abs(r.concentration_point[0] - 0.3) for r in result]
        assert distances[-1] <= 0.25 ** (4.0 / 3.0) * 0.125 + 1e-9

    def test_ledger_is_finite(self, short_sweep):
        _, result = short_sweep
        for record in result:
            assert set(record.ledger_ratios) == {
                "hls",
                "kinetic_lebesgue",
                "v_window_max",
                "gradient_window_max",
                "hjb_residual",
                "duality_gap",
            }
            assert all(np.isfinite(v) for v in record.ledger_ratios.values())

    def test_failing_rung_keeps_earlier_records(self, spec_1d):
        result = run_sweep(spec_1d, [1.0, 0.5], max_outer=1)
        assert not result.completed
        assert result.failed_epsilon == 1.0
        assert len(result) == 0
        assert "ConvergenceError" in result.error


class TestTwoWellSweep:
    """Test that small-viscosity sweeps settle in the flattest well."""

    @pytest.mark.parametrize("flat_center", [1.0, -1.0])
    def test_limit_is_the_flattest_well(self, flat_center):
        spec = _two_well(flat_center)
        result = run_sweep(spec, geometric_ladder(1.0, 4), max_outer=400)
        assert result.completed, result.error
        assert [r.epsilon for r in result] == [1.0, 0.5, 0.25, 0.125]
        assert abs(result.records[-1].concentration_point[0] - flat_center) <= 0.25
        assert np.array_equal(spec.potential.minimizer(), [flat_center])


class TestHelpers:
    """Test warm starts, ball masses and tail fits."""

    def test_warm_start_centers_the_minimum(self, short_sweep):
        _, result = short_sweep
        warm = warm_start(result.solutions[0])
        assert integrate(warm) == pytest.approx(1.0, rel=1e-12)

    def test_ball_mass_of_uniform_density(self):
        grid = GridSpec(1, 8.0, 129)
        m = ScalarField(grid, np.full(grid.shape, 1.0 / 16.0))
        assert ball_mass(m, (0.0,), 2.0) == pytest.approx(0.25, abs=1.01 * grid.spacing / 16.0)

    def test_tail_fit_of_exponential(self):
        grid = GridSpec(1, 8.0, 129)
        m = ScalarField(grid, np.exp(-2.0 * np.abs(grid.axis)))
        slope, r2 = tail_fit(m, (0.0,))
        assert slope == pytest.approx(-2.0, rel=1e-10)
        assert r2 == pytest.approx(1.0, abs=1e-12)

    def test_tail_fit_without_tail(self):
        grid = GridSpec(1, 8.0, 129)
        m = ScalarField(grid, np.where(np.abs(grid.axis) < 1.0, 1.0, 0.0))
        slope, r2 = tail_fit(m, (0.0,))
        assert np.isnan(slope)
        assert r2 == 0.0

    def test_candidates_without_a_previous_point(self, spec_1d):
        (origin,) = candidate_origins(spec_1d, 0.5, None)
        assert np.array_equal(origin, [0.0])

    def test_single_well_keeps_the_measured_point(self, spec_1d):
        (origin,) = candidate_origins(spec_1d, 0.25, np.array([0.31]))
        assert origin[0] == 0.31

    def test_distant_wells_become_candidates(self, two_well_spec):
        # at eps = 1/4 the central half of the frame reaches 0.63 from the anchor
        origins = candidate_origins(two_well_spec, 0.25, np.array([1.0]))
        assert [o[0] for o in origins] == [1.0, -1.0]
        assert len(candidate_origins(two_well_spec, 1.0, np.array([1.0]))) == 1

    def test_richardson(self):
        assert richardson(1.1, 1.05) == pytest.approx(1.0)
        assert richardson(1.4, 1.1, order=2.0) == pytest.approx(1.0)

    def test_richardson_table_removes_successive_orders(self):
        """Three levels of c0 + c1 h + c2 h^2 are extrapolated exactly."""
        values = [2.0 + 3.0 * h - 5.0 * h**2 for h in (0.1, 0.05, 0.025)]
        assert richardson_table(values, (1.0, 2.0)) == pytest.approx(2.0, rel=1e-12)

    def test_richardson_table_on_arrays(self):
        levels = [np.array([1.0, 4.0]) + h**2 * np.array([1.0, -2.0]) + h**4 for h in (0.2, 0.1, 0.05)]
        out = richardson_table(levels, (2.0, 4.0))
        assert np.allclose(out, [1.0, 4.0], rtol=0.0, atol=1e-12)

    def test_richardson_table_level_count(self):
        with pytest.raises(ValueError):
            richardson_table([1.0, 2.0], (1.0, 2.0))

    def test_subadditivity_split_range(self, spec_1d):
        with pytest.raises(SpecValidationError):
            subadditivity_probe(spec_1d, 1.0)

    def test_splitting_the_mass_raises_the_energy(self, spec_1d):
        """e(M) < e(a) + e(M - a) for an attractive interaction."""
        whole, split = subadditivity_probe(spec_1d, 0.5, epsilon=0.125)
        assert np.isfinite(whole)
        assert whole < split


class TestScalingFit:
    """Test log-log fits on synthetic records."""

    def test_recovers_the_exponent(self, spec_1d):
        records = [make_record(e, -3.0 * e ** (-2.0 / 3.0)) for e in geometric_ladder(1.0, 6)]
        slope, r2 = fit_scaling_exponent(records, ScalingQuantity.ENERGY)
        assert slope == pytest.approx(target_slope(spec_1d), rel=1e-10)
        assert r2 == pytest.approx(1.0)

    def test_window_filters_records(self):
        records = [make_record(e, -(e ** -0.5)) for e in geometric_ladder(1.0, 6)]
        slope, _ = fit_scaling_exponent(records, "lambda", max_epsilon=0.25)
        assert slope == pytest.approx(-0.5, rel=1e-10)
        with pytest.raises(ValueError):
            fit_scaling_exponent(records, "lambda", max_epsilon=0.1)

    def test_positive_values_rejected(self):
        records = [make_record(e, 1.0) for e in geometric_ladder(1.0, 5)]
        with pytest.raises(ValueError):
            fit_scaling_exponent(records, ScalingQuantity.LAMBDA)

    def test_target_slope(self, spec_1d):
        assert target_slope(spec_1d) == pytest.approx(-2.0 / 3.0)


class TestConcentrationReport:
    """Test the extrapolated concentration point."""

    def test_geometric_points_extrapolate_to_the_well(self, spec_1d):
        records = [make_record(e, point=(p,)) for e, p in [(0.25, 0.7), (0.125, 0.5), (0.0625, 0.4)]]
        limit, value = concentration_report(records, spec_1d)
        assert limit[0] == pytest.approx(0.3, abs=1e-12)
        assert value == pytest.approx(0.0, abs=1e-20)

    def test_settled_points_are_kept(self, spec_1d):
        records = [make_record(e, point=(0.3 + 1e-4 * k,)) for k, e in enumerate([0.25, 0.125, 0.0625])]
        limit, _ = concentration_report(records, spec_1d)
        assert limit[0] == pytest.approx(0.3002)

    def test_jumping_points(self, spec_1d):
        records = [make_record(e, point=(p,)) for e, p in [(0.25, 0.3), (0.125, 0.31), (0.0625, -1.7)]]
        with pytest.raises(NonCauchyError):
            concentration_report(records, spec_1d)

    def test_needs_three_records(self, spec_1d):
        with pytest.raises(ValueError):
            concentration_report([make_record(0.5), make_record(0.25)], spec_1d)

    def test_suppressed_without_potential(self, spec_1d):
        flat = spec_1d.with_changes(potential=PotentialSpec())
        assert concentration_report([make_record(0.5)] * 3, flat) is None
