"""
Vanishing-viscosity continuation.

Every rung is solved directly in its rescaled frame (unit viscosity, potential
V_eps), so the grid resolves the concentrated profile at every eps. The first
frame is anchored at the origin; every later one at the concentration point
measured on the previous rung, warm-started from the previous rescaled
density, which the limit system keeps nearly eps-independent. With several
wells, wells outside the central half of the frame are tried as extra anchors
and the lowest-energy frame is kept.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from src.core.config import get_config
from src.core.errors import MFGLabError, NonCauchyError, SpecValidationError
from src.core.logging_setup import get_logger
from src.coupling.riesz import hls_ratio
from src.grid.grid import ScalarField, gradient_upwind, integrate, operators
from src.model.energy import EnergyBreakdown, kinetic_lebesgue_ratio
from src.model.problem import PotentialKind, ProblemSpec
from src.observability.metrics import get_metrics_collector
from src.solvers.mfg import MFGSolution, solve_mfg
from src.analysis.rescaling import exponents, locate_argmin_translation, rescaled_spec, shift_nodes

logger = get_logger(__name__)

TAIL_FLOOR = 1e-12
MIN_FIT_RECORDS = 4


class ScalingQuantity(str, Enum):
    ENERGY = "energy"
    LAMBDA = "lambda"


@dataclass(frozen=True)
class SweepRecord:
    epsilon: float
    lambda_: float
    lambda_rescaled: float
    energy_total: float
    energy_parts: EnergyBreakdown
    concentration_point: tuple[float, ...]
    mass_in_ball: float
    y_eps_scaled: float
    sup_m_rescaled: float
    tail_slope: float
    tail_r_squared: float
    outer_iterations: int = 0
    ledger_ratios: dict[str, float] = field(default_factory=dict)


@dataclass
class SweepResult:
    records: list[SweepRecord] = field(default_factory=list)
    # rescaled-frame solutions and frame anchors, one per completed rung
    solutions: list[MFGSolution] = field(default_factory=list, repr=False)
    origins: list[tuple[float, ...]] = field(default_factory=list)
    error: Optional[str] = None
    failed_epsilon: Optional[float] = None

    @property
    def completed(self) -> bool:
        return self.error is None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def geometric_ladder(eps0: float = 1.0, rungs: int = 7) -> list[float]:
    """eps_k = eps0 * 2^-k, k = 0..rungs-1."""
    if eps0 <= 0 or rungs < 1:
        raise SpecValidationError(f"ladder needs eps0 > 0 and rungs >= 1, got {eps0}, {rungs}")
    return [eps0 * 2.0 ** (-k) for k in range(rungs)]


def _check_ladder(ladder: Sequence[float]) -> None:
    if len(ladder) == 0:
        raise SpecValidationError("empty epsilon ladder")
    eps = np.asarray(ladder, dtype=np.float64)
    if np.any(eps <= 0):
        raise SpecValidationError("ladder values must be positive")
    if np.any(np.diff(eps) >= 0):
        raise SpecValidationError("ladder must be strictly decreasing")


def warm_start(previous: MFGSolution) -> ScalarField:
    """Previous rescaled density moved so that its u-minimum sits on the origin node."""
    grid = previous.spec.grid
    center = grid.points_per_axis // 2
    offset = tuple(i - center for i in previous.u.argmin())
    m = shift_nodes(previous.m, offset, fill=0.0)
    return m.with_values(m.values * previous.spec.mass / integrate(m), name="m_warm")


def ball_mass(m: ScalarField, center: Sequence[float], radius: float) -> float:
    inside = (m.grid.radius(center) <= radius).ravel()
    return float(operators(m.grid).weights[inside] @ m.flat[inside])


def tail_fit(m: ScalarField, center: Sequence[float]) -> tuple[float, float]:
    """(slope, r^2) of log m against |y - center| over the outer half of the box."""
    grid = m.grid
    outer = np.max(np.abs(np.stack(grid.mesh())), axis=0) >= 0.5 * grid.half_width
    usable = outer & (m.values > TAIL_FLOOR * float(np.max(m.values)))
    if np.count_nonzero(usable) < 3:
        return float("nan"), 0.0
    r = grid.radius(center)[usable]
    fit = stats.linregress(r, np.log(m.values[usable]))
    return float(fit.slope), float(fit.rvalue**2)


def _ledger(frame: ProblemSpec, sol: MFGSolution, y_star: NDArray[np.float64], radius: float) -> dict[str, float]:
    window = frame.grid.radius(y_star) <= radius
    grad = gradient_upwind(sol.u).magnitude()
    return {
        "hls": hls_ratio(frame.kernel, sol.m),
        "kinetic_lebesgue": kinetic_lebesgue_ratio(frame, sol.m, sol.energy.kinetic),
        "v_window_max": float(np.max(frame.potential_field().values[window])),
        "gradient_window_max": float(np.max(grad[window])),
        "hjb_residual": sol.hjb_residual,
        "duality_gap": sol.duality_gap,
    }


def solve_rung(
    spec: ProblemSpec,
    epsilon: float,
    origin: NDArray[np.float64],
    init_density: ScalarField | None = None,
    damping: float | None = None,
    tol: float | None = None,
    max_outer: int | None = None,
) -> MFGSolution:
    frame = rescaled_spec(spec, epsilon, origin)
    sol = solve_mfg(frame, init_density=init_density, damping=damping, tol=tol, max_outer=max_outer)
    return replace(sol, epsilon=epsilon)


def candidate_origins(
    spec: ProblemSpec,
    epsilon: float,
    point: NDArray[np.float64] | None,
) -> list[NDArray[np.float64]]:
    """Frame anchors for a rung: the previous concentration point, then distant wells."""
    if point is None:
        return [np.zeros(spec.dim)]
    origins = [np.asarray(point, dtype=np.float64)]
    if spec.potential.kind is PotentialKind.MULTI_WELL:
        reach = 0.5 * exponents(spec).length(epsilon) * spec.grid.half_width
        for well in spec.potential.wells:
            center = np.asarray(well.center, dtype=np.float64)
            if np.linalg.norm(center - origins[0]) > reach:
                origins.append(center)
    return origins


def solve_frames(
    spec: ProblemSpec,
    epsilon: float,
    origins: Sequence[NDArray[np.float64]],
    init_density: ScalarField | None = None,
    damping: float | None = None,
    tol: float | None = None,
    max_outer: int | None = None,
) -> tuple[MFGSolution, NDArray[np.float64]]:
    """Lowest-energy solve over the candidate frames; the warm start only seeds the first."""
    best: tuple[MFGSolution, NDArray[np.float64]] | None = None
    first_error: MFGLabError | None = None
    for k, origin in enumerate(origins):
        try:
            sol = solve_rung(spec, epsilon, origin, init_density if k == 0 else None, damping, tol, max_outer)
        except MFGLabError as exc:
            logger.warning("sweep_frame_failed", epsilon=epsilon, origin=origin.tolist(), error=str(exc))
            first_error = first_error or exc
            continue
        if best is None or sol.energy.total < best[0].energy.total:
            best = (sol, origin)
    if best is None:
        raise first_error
    if len(origins) > 1:
        logger.info("sweep_frame_selected", epsilon=epsilon, origin=best[1].tolist(), candidates=len(origins))
    return best


def make_record(
    spec: ProblemSpec,
    sol: MFGSolution,
    origin: NDArray[np.float64],
    radius: float,
) -> SweepRecord:
    eps = sol.epsilon
    exp = exponents(spec)
    y_star = locate_argmin_translation(sol)
    point = origin + exp.length(eps) * y_star
    scale = eps ** (-exp.value)
    slope, r2 = tail_fit(sol.m, y_star)
    parts = sol.energy.scaled(scale)
    return SweepRecord(
        epsilon=eps,
        lambda_=scale * sol.lambda_,
        lambda_rescaled=sol.lambda_,
        energy_total=parts.total,
        energy_parts=parts,
        concentration_point=tuple(float(x) for x in point),
        mass_in_ball=ball_mass(sol.m, y_star, radius),
        y_eps_scaled=float(np.linalg.norm(point)),
        sup_m_rescaled=float(np.max(sol.m.values)),
        tail_slope=slope,
        tail_r_squared=r2,
        outer_iterations=sol.outer_iterations,
        ledger_ratios=_ledger(sol.spec, sol, y_star, radius),
    )


def run_sweep(
    spec: ProblemSpec,
    ladder: Sequence[float],
    radius: float = 6.0,
    eta: float = 0.05,
    damping: float | None = None,
    tol: float | None = None,
    max_outer: int | None = None,
) -> SweepResult:
    """Solve every rung in its rescaled frame; a failing rung ends the sweep with the records so far."""
    _check_ladder(ladder)
    if radius <= 0 or not 0 < eta < spec.mass:
        raise SpecValidationError(f"need radius > 0 and 0 < eta < M, got {radius}, {eta}")

    result = SweepResult()
    previous: MFGSolution | None = None
    point: NDArray[np.float64] | None = None
    collector = get_metrics_collector()

    for eps in ladder:
        try:
            init = warm_start(previous) if previous is not None else None
            origins = candidate_origins(spec, eps, point)
            sol, origin = solve_frames(spec, eps, origins, init, damping, tol, max_outer)
            record = make_record(spec, sol, origin, radius)
        except MFGLabError as exc:
            logger.error("sweep_aborted", epsilon=eps, error=str(exc), completed=len(result.records))
            result.error = f"{type(exc).__name__}: {exc}"
            result.failed_epsilon = eps
            break

        result.records.append(record)
        result.solutions.append(sol)
        result.origins.append(tuple(float(x) for x in origin))
        collector.record_rung()
        previous = sol
        point = np.asarray(record.concentration_point)
        logger.info(
            "sweep_rung_completed",
            epsilon=eps,
            lambda_rescaled=record.lambda_rescaled,
            concentration_point=record.concentration_point,
            mass_in_ball=record.mass_in_ball,
            concentrated=record.mass_in_ball >= spec.mass - eta,
        )
    return result


def fit_scaling_exponent(
    records: Sequence[SweepRecord],
    quantity: ScalingQuantity | str,
    max_epsilon: float | None = None,
) -> tuple[float, float]:
    """(slope, r^2) of log|q| against log eps for the records with eps <= max_epsilon."""
    quantity = ScalingQuantity(quantity)
    window = [r for r in records if max_epsilon is None or r.epsilon <= max_epsilon * (1.0 + 1e-12)]
    if len(window) < MIN_FIT_RECORDS:
        raise ValueError(f"need at least {MIN_FIT_RECORDS} records to fit, got {len(window)}")
    values = np.array([r.energy_total if quantity is ScalingQuantity.ENERGY else r.lambda_ for r in window])
    if np.any(values >= 0):
        raise ValueError(f"{quantity.value} must be negative on the fit window: {values.tolist()}")
    eps = np.array([r.epsilon for r in window])
    fit = stats.linregress(np.log(eps), np.log(-values))
    return float(fit.slope), float(fit.rvalue**2)


def target_slope(spec: ProblemSpec) -> float:
    return -exponents(spec).value


def subadditivity_probe(
    spec: ProblemSpec,
    a: float,
    epsilon: float | None = None,
    origin: Sequence[float] | None = None,
) -> tuple[float, float]:
    """(e~(M), e~(a) + e~(M - a)) from three rescaled-frame solves."""
    if not 0.0 < a < spec.mass:
        raise SpecValidationError(f"split mass must lie in (0, {spec.mass}), got {a}")
    eps = spec.epsilon if epsilon is None else epsilon
    if origin is None:
        origin = spec.potential.minimizer()
    anchor = np.zeros(spec.dim) if origin is None else np.asarray(origin, dtype=np.float64)

    def minimized(mass: float) -> float:
        return solve_rung(spec.with_changes(mass=mass), eps, anchor).energy.total

    masses = (spec.mass, a, spec.mass - a)
    with ThreadPoolExecutor(max_workers=get_config().MFGLAB_THREADS) as pool:
        whole, left, right = pool.map(minimized, masses)
    logger.info("subadditivity_probe", epsilon=eps, split=a, lhs=whole, rhs=left + right)
    return whole, left + right


def concentration_report(
    records: Sequence[SweepRecord],
    spec: ProblemSpec,
) -> tuple[NDArray[np.float64], float] | None:
    """Extrapolated limit of the concentration points and V there; None when V = 0."""
    if spec.potential.kind is PotentialKind.ZERO:
        logger.info("concentration_report_suppressed", reason="translation invariant")
        return None
    if len(records) < 3:
        raise ValueError(f"need at least 3 records, got {len(records)}")

    tail = records[-3:]
    x1, x2, x3 = (np.asarray(r.concentration_point) for r in tail)
    d1, d2 = x2 - x1, x3 - x2
    diameter = max(np.linalg.norm(x2 - x1), np.linalg.norm(x3 - x2), np.linalg.norm(x3 - x1))
    exp = exponents(spec)
    # one frame node in original coordinates
    resolution = max(exp.length(r.epsilon) for r in tail) * spec.grid.spacing

    if diameter <= 2.0 * resolution:
        limit = x3
    else:
        gap = float(np.linalg.norm(d1))
        if diameter > 10.0 * gap:
            raise NonCauchyError(f"concentration points spread over {diameter:.3e} after a gap of {gap:.3e}")
        ratio = float(np.linalg.norm(d2)) / gap
        limit = x3 + d2 * ratio / (1.0 - ratio) if ratio < 1.0 else x3
        if ratio >= 1.0:
            logger.warning("concentration_not_contracting", ratio=ratio)
    value = float(spec.potential.evaluate(limit)[0])
    logger.info("concentration_report", limit=limit.tolist(), potential=value)
    return limit, value


def richardson(coarse: float, fine: float, order: float = 1.0) -> float:
    """Extrapolate a pair computed at h and h/2 with error O(h^order)."""
    factor = 2.0**order
    return (factor * fine - coarse) / (factor - 1.0)


def richardson_table(values: Sequence, orders: Sequence[float]):
    """Repeated Richardson elimination over levels h, h/2, h/4, ...

    Pass k removes the error term of order orders[k] from every consecutive pair, so
    len(orders) + 1 levels give one extrapolated value. Works elementwise on arrays.
    """
    if len(values) != len(orders) + 1:
        raise ValueError(f"{len(orders)} elimination orders need {len(orders) + 1} levels, got {len(values)}")
    column = [np.asarray(v, dtype=np.float64) for v in values]
    for order in orders:
        column = [richardson(coarse, fine, order) for coarse, fine in zip(column[:-1], column[1:])]
    out = column[0]
    return float(out) if out.ndim == 0 else out
