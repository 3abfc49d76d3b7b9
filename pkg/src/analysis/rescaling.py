"""
Change of variables between the original frame x and the rescaled frame y.

With s = g'/(g' - N + a) a frame anchored at `origin` maps y to
x = origin + eps^s y, and

    u~(y) = eps^p u(x),  m~(y) = eps^(N s) m(x),  lambda~ = eps^(s (N - a)) lambda

turns the eps-viscous system into one with unit viscosity, the same Riesz
coupling and the potential V_eps(y) = eps^(s (N - a)) V(x). Energies scale
like lambda.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from src.core.errors import BoxTooSmallError, SpecValidationError
from src.core.logging_setup import get_logger
from src.grid.grid import GridSpec, ScalarField, boundary_ratio, integrate, operators, resample
from src.model.energy import FlowPair, continuity_residual, evaluate_energy
from src.model.problem import PotentialKind, PotentialSpec, ProblemSpec
from src.solvers.hjb import hjb_residual, monotone_policy, optimal_drift
from src.solvers.mfg import MFGSolution, coupling_potential, duality_gap

logger = get_logger(__name__)

BOX_DENSITY_LIMIT = 1e-8


@dataclass(frozen=True)
class ScaleExponents:
    space: float
    value: float
    density: float
    u_exponent: float

    def length(self, epsilon: float) -> float:
        """eps^s: one rescaled unit in original coordinates."""
        return epsilon**self.space


def scale_exponents(dim: int, gamma: float, alpha: float) -> ScaleExponents:
    gc = gamma / (gamma - 1.0)
    denom = gc - dim + alpha
    if denom <= 0:
        raise SpecValidationError(f"g' - N + alpha = {denom:.6g} is not positive; no concentration scale")
    return ScaleExponents(
        space=gc / denom,
        value=(dim - alpha) * gc / denom,
        density=dim * gc / denom,
        u_exponent=(gc * (dim - alpha) - gc - dim + alpha) / denom,
    )


def exponents(spec: ProblemSpec) -> ScaleExponents:
    return scale_exponents(spec.dim, spec.gamma, spec.alpha)


def _origin(spec: ProblemSpec, origin: Sequence[float] | None) -> NDArray[np.float64]:
    return np.zeros(spec.dim) if origin is None else np.asarray(origin, dtype=np.float64).reshape(spec.dim)


def rescaled_potential(
    spec: ProblemSpec,
    y: NDArray[np.float64],
    epsilon: float | None = None,
    origin: Sequence[float] | None = None,
) -> NDArray[np.float64]:
    """V_eps at (k, dim) rescaled points."""
    eps = spec.epsilon if epsilon is None else epsilon
    exp = exponents(spec)
    pts = np.atleast_2d(np.asarray(y, dtype=np.float64))
    return eps**exp.value * spec.potential.evaluate(_origin(spec, origin) + exp.length(eps) * pts)


def rescaled_spec(
    spec: ProblemSpec,
    epsilon: float | None = None,
    origin: Sequence[float] | None = None,
    grid: GridSpec | None = None,
) -> ProblemSpec:
    """Unit-viscosity problem of the frame anchored at origin; V_eps is tabulated on the frame grid."""
    eps = spec.epsilon if epsilon is None else epsilon
    target = spec.grid if grid is None else grid
    if spec.potential.kind is PotentialKind.ZERO:
        potential = spec.potential
    else:
        values = rescaled_potential(spec, target.nodes(), eps, origin).reshape(target.shape)
        potential = PotentialSpec(PotentialKind.CUSTOM_TABLE, table=ScalarField(target, values, name="V_eps"))
    return spec.with_changes(epsilon=1.0, grid=target, potential=potential)


def _frame_solution(
    spec: ProblemSpec,
    u: ScalarField,
    m: ScalarField,
    lambda_: float,
    epsilon: float,
    outer_iterations: int = 0,
) -> MFGSolution:
    pair = FlowPair(m, optimal_drift(spec, u).scaled(m.values), feasible=True)
    forcing = spec.potential_field().values - coupling_potential(spec, m).values
    return MFGSolution(
        spec=spec,
        u=u,
        m=m,
        w=pair.w,
        lambda_=lambda_,
        epsilon=epsilon,
        energy=evaluate_energy(spec, pair),
        fp_residual=continuity_residual(spec, pair),
        outer_iterations=outer_iterations,
        hjb_residual=hjb_residual(spec, u, lambda_, u.with_values(forcing, name="f")),
        duality_gap=duality_gap(spec, lambda_, pair, m),
        self_duality_gap=duality_gap(spec, lambda_, pair, m),
        coupling_density=m,
    )


def _check_box(m: ScalarField) -> None:
    ratio = boundary_ratio(m)
    if ratio > BOX_DENSITY_LIMIT:
        raise BoxTooSmallError(
            f"density on the boundary of [-{m.grid.half_width:g}, {m.grid.half_width:g}]^{m.grid.dim} "
            f"is {ratio:.3e} of its peak"
        )


def _covered(source: GridSpec, target: GridSpec, coordinate_map) -> NDArray[np.bool_]:
    """Target nodes whose image lies inside the source box (u is only extrapolated elsewhere)."""
    image = coordinate_map(target.nodes())
    inside = np.all(np.abs(image) <= source.half_width * (1.0 + 1e-12), axis=1)
    if not np.any(inside):
        raise BoxTooSmallError("target grid does not overlap the source box")
    return inside.reshape(target.shape)


def rescale_solution(
    sol: MFGSolution,
    target_grid: GridSpec,
    origin: Sequence[float] | None = None,
) -> MFGSolution:
    """Original-frame solution -> (u~, m~, lambda~) on target_grid by cubic interpolation."""
    spec = sol.spec
    eps = sol.epsilon
    exp = exponents(spec)
    shift = _origin(spec, origin)
    length = exp.length(eps)

    def to_original(y: NDArray[np.float64]) -> NDArray[np.float64]:
        return shift + length * y

    m_values = resample(sol.m, target_grid, to_original, fill_value=0.0).values
    m = ScalarField(target_grid, eps**exp.density * np.maximum(m_values, 0.0), name="m_rescaled")
    _check_box(m)
    u_values = np.array(resample(sol.u, target_grid, to_original, fill_value=None).values)
    u_values -= np.min(u_values[_covered(sol.u.grid, target_grid, to_original)])
    u = ScalarField(target_grid, eps**exp.u_exponent * u_values, name="u_rescaled")

    frame = rescaled_spec(spec, eps, shift, target_grid)
    out = _frame_solution(frame, u, m, eps**exp.value * sol.lambda_, eps, sol.outer_iterations)
    logger.debug("solution_rescaled", epsilon=eps, mass=integrate(m), lambda_rescaled=out.lambda_)
    return out


def unrescale_solution(
    sol: MFGSolution,
    spec: ProblemSpec,
    origin: Sequence[float] | None = None,
) -> MFGSolution:
    """Inverse of rescale_solution onto spec.grid; sol.epsilon names the frame."""
    eps = sol.epsilon
    exp = exponents(spec)
    shift = _origin(spec, origin)
    length = exp.length(eps)

    def to_rescaled(x: NDArray[np.float64]) -> NDArray[np.float64]:
        return (x - shift) / length

    grid = spec.grid
    m_values = resample(sol.m, grid, to_rescaled, fill_value=0.0).values
    m = ScalarField(grid, eps ** (-exp.density) * np.maximum(m_values, 0.0), name="m")
    _check_box(m)
    u_values = np.array(resample(sol.u, grid, to_rescaled, fill_value=None).values)
    u_values -= np.min(u_values[_covered(sol.u.grid, grid, to_rescaled)])
    u = ScalarField(grid, eps ** (-exp.u_exponent) * u_values, name="u")
    return _frame_solution(spec.with_changes(epsilon=eps), u, m, eps ** (-exp.value) * sol.lambda_, eps, sol.outer_iterations)


def locate_argmin_translation(sol: MFGSolution) -> NDArray[np.float64]:
    """Grid argmin of u (ties to the smallest lexicographic node); refuses boundary minima."""
    index = sol.u.argmin()
    grid = sol.u.grid
    if grid.boundary_mask()[index]:
        raise BoxTooSmallError(f"u attains its minimum on the boundary node {index}")
    return grid.node(index)


def _center_index(grid: GridSpec) -> tuple[int, ...]:
    if grid.points_per_axis % 2 == 0:
        raise SpecValidationError("recentering needs a node at the origin (odd points_per_axis)")
    return (grid.points_per_axis // 2,) * grid.dim


def shift_nodes(f: ScalarField, offset: Sequence[int], fill: NDArray[np.float64] | float = 0.0) -> ScalarField:
    """g[i] = f[i + offset]; nodes whose source falls outside the grid take `fill`."""
    n = f.grid.points_per_axis
    out = np.broadcast_to(np.asarray(fill, dtype=np.float64), f.grid.shape).copy()
    dst, src = [], []
    for k in offset:
        k = int(k)
        if abs(k) >= n:
            return f.with_values(out)
        dst.append(slice(max(0, -k), n - max(0, k)))
        src.append(slice(max(0, k), n + min(0, k)))
    out[tuple(dst)] = f.values[tuple(src)]
    return f.with_values(out)


def recenter(sol: MFGSolution) -> tuple[MFGSolution, NDArray[np.float64]]:
    """Translate so that the argmin of u sits on the origin node with value 0; returns (u-bar frame, y_eps)."""
    grid = sol.spec.grid
    y_eps = locate_argmin_translation(sol)
    center = _center_index(grid)
    offset = tuple(a - c for a, c in zip(sol.u.argmin(), center))

    # u values entering from outside the box are extrapolated
    entering = resample(sol.u, grid, lambda y: y + y_eps, fill_value=None).values
    u = shift_nodes(sol.u, offset, fill=entering)
    u = u.with_values(np.maximum(u.values - u.values[center], 0.0), name="u_bar")
    m = shift_nodes(sol.m, offset, fill=0.0)
    m = m.with_values(m.values, name="m_bar")

    spec = sol.spec
    if spec.potential.kind is PotentialKind.CUSTOM_TABLE:
        table = spec.potential.table
        entering = resample(table, grid, lambda y: y + y_eps, fill_value=None).values
        v = shift_nodes(table, offset, fill=entering)
        spec = spec.with_changes(
            potential=PotentialSpec(PotentialKind.CUSTOM_TABLE, table=v.with_values(np.maximum(v.values, 0.0)))
        )
    elif spec.potential.kind is not PotentialKind.ZERO:
        spec = spec.with_changes(potential=_translated_potential(spec.potential, y_eps))
    return _frame_solution(spec, u, m, sol.lambda_, sol.epsilon, sol.outer_iterations), y_eps


def _translated_potential(potential: PotentialSpec, shift: NDArray[np.float64]) -> PotentialSpec:
    if potential.kind is PotentialKind.MULTI_WELL:
        wells = tuple(replace(w, center=tuple(float(c) for c in np.asarray(w.center) - shift)) for w in potential.wells)
        return replace(potential, wells=wells)
    return replace(potential, kind=PotentialKind.SHIFTED_POWER, center=tuple(np.asarray(potential.center) - shift))


def frame_residual(sol: MFGSolution) -> tuple[float, float]:
    """(HJB max residual, continuity L1 residual) of sol on its own grid, with the optimal-drift flux."""
    spec = sol.spec
    forcing = spec.potential_field().values - coupling_potential(spec, sol.m).values
    hjb = hjb_residual(spec, sol.u, sol.lambda_, sol.u.with_values(forcing, name="f"))
    pair = FlowPair(sol.m, optimal_drift(spec, sol.u).scaled(sol.m.values), feasible=True)
    return hjb, continuity_residual(spec, pair)


def solution_from_fields(
    spec: ProblemSpec,
    u: ScalarField,
    m: ScalarField,
    epsilon: float | None = None,
) -> MFGSolution:
    """Rebuild a solution from stored (u, m); lambda is the median of the pointwise HJB balance."""
    ham, _ = monotone_policy(spec, u)
    lap = operators(spec.grid).laplacian @ u.flat
    forcing = spec.potential_field().flat - coupling_potential(spec, m).flat
    lambda_ = float(np.median(forcing - (-spec.epsilon * lap + ham)))
    eps = spec.epsilon if epsilon is None else epsilon
    return _frame_solution(spec, u, m, lambda_, eps)
