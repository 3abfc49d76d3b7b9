"""
Damped Picard iteration on the density:

    m_{k+1} = (1 - theta) m_k + theta FP(HJB(V - K * m_k))

Each best response minimizes the linearized energy, which majorizes the full
energy, so the energy of accepted iterates does not increase in exact
arithmetic. A sustained increase is treated as oscillation.

After MFG_ADAPTIVE_AFTER outer steps a coupled solve switches to Aitken
(Irons-Tuck) relaxation of theta, clipped so the iterate stays nonnegative.
Convergence is measured on the base-damped step in both modes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from src.core.config import get_config
from src.core.errors import ConvergenceError, OscillationError, UnderResolvedError
from src.core.logging_setup import get_logger
from src.coupling.riesz import convolve
from src.grid.grid import ScalarField, VectorField, integrate, operators
from src.model.energy import (
    MIN_POINTS_PER_EFOLD,
    EnergyBreakdown,
    FlowPair,
    build_test_pair,
    concentration_tau,
    continuity_residual,
    evaluate_energy,
    evaluate_linearized_energy,
)
from src.model.problem import ProblemSpec
from src.observability.metrics import MetricsTimer, get_metrics_collector
from src.solvers.fokker_planck import solve_stationary
from src.solvers.hjb import drift_from_policy, solve_ergodic

logger = get_logger(__name__)


@dataclass(frozen=True)
class MFGSolution:
    spec: ProblemSpec = field(repr=False)
    u: ScalarField = field(repr=False)
    m: ScalarField = field(repr=False)
    w: VectorField = field(repr=False)
    lambda_: float
    epsilon: float
    energy: EnergyBreakdown
    fp_residual: float
    outer_iterations: int
    hjb_residual: float = 0.0
    # relative gap of lambda*M against the linearized energy frozen at the coupling density
    duality_gap: float = 0.0
    # same gap with the output density frozen
    self_duality_gap: float = 0.0
    coupling_density: ScalarField | None = field(default=None, repr=False)
    energy_trace: tuple[float, ...] = field(default=(), repr=False)

    @property
    def pair(self) -> FlowPair:
        return FlowPair(self.m, self.w, feasible=True)

    @property
    def mass(self) -> float:
        return integrate(self.m)


def coupling_potential(spec: ProblemSpec, m: ScalarField) -> ScalarField:
    """coupling * K * m (zero field when the interaction is switched off)."""
    if spec.coupling == 0.0:
        return ScalarField.zeros(spec.grid, name="K*m")
    conv = convolve(spec.kernel, m)
    return conv.with_values(spec.coupling * conv.values)


def default_initial_density(spec: ProblemSpec) -> ScalarField:
    """Exponential test profile at the concentration scale, capped by the grid resolution."""
    tau = min(concentration_tau(spec), 1.0 / (MIN_POINTS_PER_EFOLD * spec.grid.spacing))
    center = spec.potential.minimizer()
    try:
        return build_test_pair(spec, tau, center).m
    except UnderResolvedError:
        return build_test_pair(spec, 0.5 * tau, center).m


def duality_gap(spec: ProblemSpec, lambda_: float, pair: FlowPair, frozen: ScalarField) -> float:
    target = lambda_ * spec.mass
    return abs(target - evaluate_linearized_energy(spec, pair, frozen)) / (abs(target) + 1e-12)


def aitken_weight(
    theta: float,
    step: np.ndarray,
    previous: np.ndarray,
    weights: np.ndarray,
    m: np.ndarray,
    bounds: tuple[float, float],
) -> float:
    """Next relaxation weight from two consecutive best-response steps d = FP(HJB(m)) - m."""
    delta = (step - previous).ravel()
    denom = float(weights @ (delta * delta))
    if denom > 0.0:
        theta = -theta * float(weights @ (previous.ravel() * delta)) / denom
    theta = float(np.clip(theta, *bounds))
    shrinking = step < 0.0
    if np.any(shrinking):
        # theta = 1 lands on the best response itself, which is nonnegative
        room = float(np.min(m[shrinking] / -step[shrinking]))
        theta = min(theta, max(1.0, 0.9 * room))
    return theta


def solve_mfg(
    spec: ProblemSpec,
    init_density: ScalarField | None = None,
    damping: float | None = None,
    tol: float | None = None,
    max_outer: int | None = None,
) -> MFGSolution:
    config = get_config()
    damping = config.MFG_DAMPING if damping is None else damping
    tol = config.MFG_TOL if tol is None else tol
    max_outer = config.MFG_MAX_OUTER if max_outer is None else max_outer
    if not 0.0 < damping <= 1.0:
        raise ValueError(f"damping must lie in (0, 1], got {damping}")

    grid = spec.grid
    potential = spec.potential_field()
    m = init_density if init_density is not None else default_initial_density(spec)
    m = m.with_values(m.values * spec.mass / integrate(m), name="m")
    # with no coupling the best response does not depend on m
    base = 1.0 if spec.coupling == 0.0 else damping
    theta = base
    adaptive = spec.coupling != 0.0
    weights = operators(grid).weights
    bounds = (config.MFG_MIN_DAMPING, config.MFG_MAX_RELAXATION)
    step_prev = None

    energies: list[float] = []
    streak = 0
    u_prev = None
    change = float("inf")

    with MetricsTimer("mfg"):
        for outer in range(1, max_outer + 1):
            f = potential.with_values(potential.values - coupling_potential(spec, m).values, name="f")
            ergodic = solve_ergodic(spec, f, u0=u_prev)
            u_prev = ergodic.u
            drift = drift_from_policy(grid, ergodic.policy)
            dens = solve_stationary(spec, drift)
            best = FlowPair(dens.m, dens.flux, feasible=True)

            energy = evaluate_energy(spec, best)
            if energies and energy.total > energies[-1] + 1e-10 * (1.0 + abs(energies[-1])):
                streak += 1
            else:
                streak = 0
            energies.append(energy.total)
            if streak >= config.MFG_OSCILLATION_WINDOW:
                raise OscillationError(
                    f"energy increased for {streak} consecutive steps; retry with damping below {theta}",
                    residual=change,
                    iterate=m,
                )

            step = dens.m.values - m.values
            if adaptive and step_prev is not None and outer > config.MFG_ADAPTIVE_AFTER:
                theta = aitken_weight(theta, step, step_prev, weights, m.values, bounds)
                if streak:
                    theta = min(theta, base)
            step_prev = step
            nxt = m.values + theta * step
            change = base * integrate(m.with_values(np.abs(step)))
            logger.debug(
                "mfg_outer_iteration",
                outer=outer,
                change=change,
                theta=theta,
                lambda_=ergodic.lambda_,
                energy=energy.total,
            )
            if change < tol * spec.mass:
                break
            m = m.with_values(nxt)
        else:
            raise ConvergenceError(
                f"fixed point did not converge in {max_outer} outer iterations",
                residual=change,
                iterate=m.with_values(nxt),
            )

    gap = duality_gap(spec, ergodic.lambda_, best, m)
    self_gap = duality_gap(spec, ergodic.lambda_, best, dens.m)
    if gap > config.DUALITY_TOL:
        raise ConvergenceError("lambda*M identity violated", residual=gap, iterate=dens.m)

    collector = get_metrics_collector()
    collector.record_iterations("mfg", outer)
    collector.set_last_lambda(ergodic.lambda_)
    logger.info(
        "mfg_converged",
        epsilon=spec.epsilon,
        outer_iterations=outer,
        lambda_=ergodic.lambda_,
        energy=energy.total,
        duality_gap=gap,
    )
    return MFGSolution(
        spec=spec,
        u=ergodic.u,
        m=dens.m,
        w=dens.flux,
        lambda_=ergodic.lambda_,
        epsilon=spec.epsilon,
        energy=energy,
        fp_residual=continuity_residual(spec, best),
        outer_iterations=outer,
        hjb_residual=ergodic.residual,
        duality_gap=gap,
        self_duality_gap=self_gap,
        coupling_density=m,
        energy_trace=tuple(energies),
    )


def minimized_energy(sol: MFGSolution) -> float:
    return sol.energy.total
