"""
Constrained energy of density-flux pairs.

    E(m, w)  = int L(m, w) + int V m - (1/2) int int m(x) m(y) K(x - y)
    E~(m, w) = int L(m, w) + int V m - int int m(x) frozen(y) K(x - y)

with L(m, w) = m |w/m|^g' / g' for m > 0, 0 for (0, 0) and +inf otherwise.
The coupling weight of the problem multiplies the double integrals.

A pair is feasible when eps * <m, -lap phi> = <w, grad phi> for every phi,
with the slot pairing of the grid module. `feasible_flux` builds the flux that
makes any density exactly feasible: each edge difference is assigned to the
node on its uphill side, so no edge is counted twice.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

import numpy as np
from numpy.typing import NDArray

from src.core.errors import UnderResolvedError
from src.core.logging_setup import get_logger
from src.coupling.riesz import cross_interaction, interaction_energy
from src.grid.grid import (
    ScalarField,
    UpwindBias,
    VectorField,
    divergence,
    gradient_upwind,
    integrate,
    laplacian,
    lebesgue_norm,
    operators,
    resample,
)
from src.model.problem import ProblemSpec

if TYPE_CHECKING:
    from src.solvers.mfg import MFGSolution

logger = get_logger(__name__)

TAU_SWEEP_POINTS = 17
MIN_POINTS_PER_EFOLD = 8.0


@dataclass(frozen=True)
class FlowPair:
    m: ScalarField
    w: VectorField
    feasible: bool = False

    def mass(self) -> float:
        return integrate(self.m)

    def validate(self, spec: ProblemSpec, residual_tol: float = 1e-8) -> list[str]:
        """List of violated pair invariants (empty when the pair is admissible)."""
        problems = []
        if float(np.min(self.m.values)) < -1e-12:
            problems.append("negative density")
        mass = self.mass()
        if abs(mass - spec.mass) > 1e-10 * spec.mass:
            problems.append(f"mass {mass!r} differs from {spec.mass!r}")
        if np.any((self.m.values == 0.0) & (self.w.magnitude() > 0.0)):
            problems.append("flux on empty cells")
        if self.feasible and continuity_residual(spec, self) > residual_tol:
            problems.append("continuity residual above tolerance")
        return problems


@dataclass(frozen=True)
class EnergyBreakdown:
    kinetic: float
    potential: float
    interaction: float
    total: float

    @classmethod
    def assemble(cls, kinetic: float, potential: float, interaction: float) -> "EnergyBreakdown":
        return cls(kinetic, potential, interaction, kinetic + potential - 0.5 * interaction)

    def scaled(self, factor: float) -> "EnergyBreakdown":
        return EnergyBreakdown(
            self.kinetic * factor, self.potential * factor, self.interaction * factor, self.total * factor
        )


def lagrangian_density(m: float, w: Sequence[float] | float, gamma_conj: float) -> float:
    if m < 0:
        raise ValueError(f"density must be nonnegative, got {m}")
    speed = float(np.linalg.norm(np.atleast_1d(np.asarray(w, dtype=np.float64))))
    if m == 0.0:
        return 0.0 if speed == 0.0 else float("inf")
    return speed**gamma_conj / (gamma_conj * m ** (gamma_conj - 1.0))


def kinetic_density(m: NDArray[np.float64], speed: NDArray[np.float64], gamma_conj: float) -> NDArray[np.float64]:
    """Vectorized lagrangian_density on nodal arrays; negative m is treated as empty."""
    out = np.zeros_like(m, dtype=np.float64)
    occupied = m > 0
    out[occupied] = speed[occupied] ** gamma_conj / (gamma_conj * m[occupied] ** (gamma_conj - 1.0))
    out[~occupied & (speed > 0)] = np.inf
    return out


def kinetic_term(spec: ProblemSpec, m: ScalarField, w: VectorField) -> float:
    dens = kinetic_density(m.values, w.magnitude(), spec.gamma_conj)
    if np.any(np.isinf(dens)):
        return float("inf")
    return float(operators(m.grid).weights @ dens.ravel())


def viscous_kinetic(spec: ProblemSpec, kinetic: float) -> float:
    """eps^-g' int m |w/m|^g', the normalization used by the integrability bounds."""
    return spec.gamma_conj * kinetic / spec.epsilon**spec.gamma_conj


def evaluate_energy(spec: ProblemSpec, pair: FlowPair) -> EnergyBreakdown:
    kinetic = kinetic_term(spec, pair.m, pair.w)
    potential = integrate(pair.m.with_values(spec.potential_field().values * pair.m.values))
    interaction = 0.0
    if spec.coupling != 0.0:
        interaction = spec.coupling * interaction_energy(spec.kernel, pair.m)
    return EnergyBreakdown.assemble(kinetic, potential, interaction)


def evaluate_linearized_energy(spec: ProblemSpec, pair: FlowPair, frozen_density: ScalarField) -> float:
    kinetic = kinetic_term(spec, pair.m, pair.w)
    potential = integrate(pair.m.with_values(spec.potential_field().values * pair.m.values))
    if spec.coupling == 0.0:
        return kinetic + potential
    return kinetic + potential - spec.coupling * cross_interaction(spec.kernel, pair.m, frozen_density)


def continuity_defect(spec: ProblemSpec, pair: FlowPair) -> ScalarField:
    """Nodal defect eps*lap(m) - div(w); identically zero for feasible pairs."""
    lap = laplacian(pair.m).values
    div = divergence(pair.w).values
    return pair.m.with_values(spec.epsilon * lap - div, name="continuity_defect")


def continuity_residual(spec: ProblemSpec, pair: FlowPair) -> float:
    defect = continuity_defect(spec, pair)
    return integrate(defect.with_values(np.abs(defect.values)))


def feasible_flux(spec: ProblemSpec, m: ScalarField) -> VectorField:
    """eps * grad m with each edge difference carried once, scaled to the node's share of the edge."""
    grad = gradient_upwind(m, UpwindBias.TRANSPORT)
    factor = np.stack(operators(m.grid).edge_factor).reshape(grad.backward.shape)
    return VectorField(m.grid, spec.epsilon * grad.backward * factor, spec.epsilon * grad.forward * factor)


def exponential_profile(spec: ProblemSpec, tau: float, center: Sequence[float] | None = None) -> NDArray[np.float64]:
    return np.exp(-tau * spec.grid.radius(center))


def profile_constant(spec: ProblemSpec, tau: float) -> float:
    """I1 = 1 / int exp(-|y|) dy on the grid, through y = tau x."""
    grid = spec.grid
    total = integrate(ScalarField(grid, exponential_profile(spec, tau)))
    return 1.0 / (tau**grid.dim * total)


def build_test_pair(spec: ProblemSpec, tau: float, center: Sequence[float] | None = None) -> FlowPair:
    """m = M tau^N I1 exp(-tau|x - c|), w = eps grad m (exactly feasible)."""
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    points_per_efold = 1.0 / (tau * spec.grid.spacing)
    if points_per_efold < MIN_POINTS_PER_EFOLD:
        raise UnderResolvedError(
            f"tau={tau:.4g} leaves {points_per_efold:.2f} points per e-fold (need {MIN_POINTS_PER_EFOLD:g})"
        )
    profile = exponential_profile(spec, tau, center)
    raw = ScalarField(spec.grid, profile)
    m = ScalarField(spec.grid, spec.mass * profile / integrate(raw), name="m_test")
    return FlowPair(m, feasible_flux(spec, m), feasible=True)


def dilate_pair(spec: ProblemSpec, pair: FlowPair, sigma: float) -> FlowPair:
    """m_s(x) = s^-N m(x/s) by cubic resampling, with its feasible flux."""
    n = spec.dim
    stretched = resample(pair.m, spec.grid, lambda x: x / sigma, fill_value=0.0, name=pair.m.name)
    values = np.maximum(stretched.values, 0.0) * sigma ** (-n)
    m = stretched.with_values(values)
    return FlowPair(m, feasible_flux(spec, m), feasible=True)


def concentration_tau(spec: ProblemSpec, scale_constant: float = 1.0) -> float:
    """tau = A^-1 eps^(-g'/(g' - N + alpha)), the concentration scale of the upper bound."""
    gc = spec.gamma_conj
    return spec.epsilon ** (-gc / (gc - spec.dim + spec.alpha)) / scale_constant


def kinetic_lebesgue_ratio(spec: ProblemSpec, m: ScalarField, kinetic: float) -> float:
    """||m||^(2g'/(N-a))_{L^(2N/(N+a))} / (M^(2g'/(N-a) - 1) E): bounded by the integrability estimate."""
    n, a, gc = spec.dim, spec.alpha, spec.gamma_conj
    exponent = 2.0 * gc / (n - a)
    e = viscous_kinetic(spec, kinetic)
    if e == 0.0:
        return float("inf")
    return lebesgue_norm(m, 2.0 * n / (n + a)) ** exponent / (spec.mass ** (exponent - 1.0) * e)


def tau_sweep(spec: ProblemSpec) -> NDArray[np.float64]:
    """17 log-spaced values over two decades centered at the concentration scale."""
    return concentration_tau(spec) * np.logspace(-1.0, 1.0, TAU_SWEEP_POINTS)


def _certificate_frame(spec: ProblemSpec) -> tuple[ProblemSpec, float, float]:
    """(unit-viscosity frame at the minimizer of V, eps^s, eps^-value)."""
    from src.analysis.rescaling import exponents, rescaled_spec

    center = spec.potential.minimizer()
    origin = np.zeros(spec.dim) if center is None else np.asarray(center, dtype=np.float64)
    exp = exponents(spec)
    return rescaled_spec(spec, spec.epsilon, origin), exp.length(spec.epsilon), spec.epsilon ** (-exp.value)


def upper_energy_certificate(spec: ProblemSpec) -> tuple[float, float]:
    """(min energy over the tau sweep, minimizing tau) in original units.

    Test pairs are built in the frame anchored at the minimizer of V, where the
    concentration scale is one grid-independent unit, so small viscosities stay
    resolved on a fixed grid. Under-resolved tau values are skipped.
    """
    frame, length, energy_scale = _certificate_frame(spec)
    best, best_tau = float("inf"), float("nan")
    for tau in tau_sweep(frame):
        try:
            pair = build_test_pair(frame, float(tau))
        except UnderResolvedError:
            continue
        total = evaluate_energy(frame, pair).total
        if total < best:
            best, best_tau = total, float(tau)
    if not np.isfinite(best):
        logger.warning("energy_certificate_unresolved", epsilon=spec.epsilon, spacing=frame.grid.spacing)
        return best, best_tau
    return energy_scale * best, best_tau / length


def two_sided_energy_bound_probe(
    spec: ProblemSpec, solution: "MFGSolution | None" = None
) -> tuple[float, float]:
    """(lower, upper): the solver's minimum and the best test-pair energy, both in original units.

    Without a solution the solver runs in the certificate's frame.
    """
    from src.solvers.mfg import solve_mfg

    upper, tau = upper_energy_certificate(spec)
    if solution is not None:
        lower = solution.energy.total
    else:
        frame, _, energy_scale = _certificate_frame(spec)
        lower = energy_scale * solve_mfg(frame).energy.total
    logger.info("energy_bound_probe", epsilon=spec.epsilon, lower=lower, upper=upper, best_tau=tau)
    return lower, upper
