"""
Hopf-Cole route for gamma = 2: v = exp(-u / (2 eps)), m = v^2 turns the MFG
system into the normalized Choquard problem

    -2 eps^2 lap v + (V - K * v^2) v = mu v,   int v^2 = M,  v > 0.

The ground state is found by a normalized gradient flow. Each step is a
backward-Euler step of the frozen linear operator, shifted so the system
matrix is an M-matrix; its inverse is positive, so every iterate stays
positive. Step sizes come from the Barzilai-Borwein rule and are halved until
the energy does not increase.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.sparse.linalg import spsolve

from src.core.config import get_config
from src.core.errors import ConvergenceError, PositivityLossError, SpecValidationError, StepCollapseError
from src.core.logging_setup import get_logger
from src.coupling.riesz import convolve
from src.grid.grid import ScalarField, operators
from src.model.energy import MIN_POINTS_PER_EFOLD, concentration_tau
from src.model.problem import ProblemSpec
from src.observability.metrics import MetricsTimer, get_metrics_collector
from src.solvers.mfg import MFGSolution

logger = get_logger(__name__)

MAX_STEP = 1e6


@dataclass(frozen=True)
class ChoquardState:
    v: ScalarField = field(repr=False)
    mu: float
    energy: float
    residual: float = 0.0
    iterations: int = 0
    energy_trace: tuple[float, ...] = field(default=(), repr=False)

    @property
    def m(self) -> ScalarField:
        return self.v.with_values(self.v.values**2, name="m")


@dataclass(frozen=True)
class ChoquardTerms:
    kinetic: float
    potential: float
    interaction: float

    @property
    def energy(self) -> float:
        return self.kinetic + self.potential - 0.5 * self.interaction


class ChoquardProblem:
    """Discrete functional and operators for one spec."""

    def __init__(self, spec: ProblemSpec):
        if spec.gamma != 2.0:
            raise SpecValidationError(f"the Hopf-Cole route needs gamma = 2, got {spec.gamma}")
        self.spec = spec
        ops = operators(spec.grid)
        self.weights = ops.weights
        self.laplacian = ops.laplacian
        self.potential = spec.potential_field().flat
        self.diffusion = 2.0 * spec.epsilon**2

    def coupling(self, v: NDArray[np.float64]) -> NDArray[np.float64]:
        if self.spec.coupling == 0.0:
            return np.zeros_like(v)
        density = ScalarField(self.spec.grid, v**2)
        return self.spec.coupling * convolve(self.spec.kernel, density).flat

    def terms(self, v: NDArray[np.float64]) -> ChoquardTerms:
        kinetic = -self.diffusion * float(self.weights @ (v * (self.laplacian @ v)))
        potential = float(self.weights @ (self.potential * v**2))
        interaction = float(self.weights @ (v**2 * self.coupling(v)))
        return ChoquardTerms(kinetic, potential, interaction)

    def apply(self, v: NDArray[np.float64], coupling: NDArray[np.float64]) -> NDArray[np.float64]:
        return -self.diffusion * (self.laplacian @ v) + (self.potential - coupling) * v

    def multiplier(self, v: NDArray[np.float64]) -> float:
        t = self.terms(v)
        return (t.kinetic + t.potential - t.interaction) / self.spec.mass

    def residual(self, v: NDArray[np.float64], mu: float) -> float:
        return float(np.max(np.abs(self.apply(v, self.coupling(v)) - mu * v)))

    def normalize(self, v: NDArray[np.float64]) -> NDArray[np.float64]:
        return v * np.sqrt(self.spec.mass / float(self.weights @ v**2))

    def flow_step(self, v: NDArray[np.float64], step: float) -> NDArray[np.float64]:
        coupling = self.coupling(v)
        shift = 1.0 / step + max(0.0, float(np.max(coupling - self.potential)))
        n = v.size
        system = shift * sp.identity(n, format="csr") - self.diffusion * self.laplacian + sp.diags(self.potential - coupling)
        return self.normalize(spsolve(sp.csc_matrix(system), shift * v))


def initial_state(spec: ProblemSpec) -> NDArray[np.float64]:
    """Gaussian at the potential minimum with width set by the concentration scale."""
    tau = min(concentration_tau(spec), 1.0 / (MIN_POINTS_PER_EFOLD * spec.grid.spacing))
    r = spec.grid.radius(spec.potential.minimizer())
    return np.exp(-0.5 * (tau * r) ** 2).ravel()


def solve_choquard(
    spec: ProblemSpec,
    v0: ScalarField | None = None,
    tol: float | None = None,
    max_iters: int | None = None,
) -> ChoquardState:
    config = get_config()
    tol = config.CHOQUARD_TOL if tol is None else tol
    max_iters = config.CHOQUARD_MAX_ITERS if max_iters is None else max_iters
    min_step = config.CHOQUARD_MIN_STEP

    problem = ChoquardProblem(spec)
    v = problem.normalize(initial_state(spec) if v0 is None else np.abs(v0.flat))
    energy = problem.terms(v).energy
    mu = problem.multiplier(v)
    gradient = problem.apply(v, problem.coupling(v)) - mu * v
    step = 1.0
    trace = [energy]
    residual = float(np.max(np.abs(gradient)))

    with MetricsTimer("choquard"):
        for iteration in range(1, max_iters + 1):
            if residual <= tol * (1.0 + abs(mu)):
                break
            while True:
                trial = problem.flow_step(v, step)
                if np.any(trial <= 0.0):
                    raise PositivityLossError("gradient flow iterate touched zero")
                trial_energy = problem.terms(trial).energy
                if trial_energy <= energy + 1e-14 * abs(energy):
                    break
                step *= 0.5
                if step < min_step:
                    raise StepCollapseError(f"step size fell below {min_step:g} at iteration {iteration}")

            trial_mu = problem.multiplier(trial)
            trial_gradient = problem.apply(trial, problem.coupling(trial)) - trial_mu * trial
            s = trial - v
            y = trial_gradient - gradient
            sy = float(problem.weights @ (s * y))
            step = float(problem.weights @ (s * s)) / sy if sy > 0 else 2.0 * step
            step = float(np.clip(step, min_step, MAX_STEP))

            v, energy, mu, gradient = trial, trial_energy, trial_mu, trial_gradient
            residual = float(np.max(np.abs(gradient)))
            trace.append(energy)
            logger.debug("choquard_step", iteration=iteration, energy=energy, mu=mu, residual=residual, step=step)
        else:
            raise ConvergenceError(
                f"gradient flow did not converge in {max_iters} steps",
                residual=residual,
                iterate=ScalarField(spec.grid, v, name="v"),
            )

    get_metrics_collector().record_iterations("choquard", iteration)
    logger.info("choquard_converged", iterations=iteration, mu=mu, energy=energy, residual=residual)
    return ChoquardState(ScalarField(spec.grid, v, name="v"), mu, energy, residual, iteration, tuple(trace))


def hopf_cole_transform(sol: MFGSolution) -> NDArray[np.float64]:
    u = sol.u.flat
    return np.exp(-(u - np.min(u)) / (2.0 * sol.spec.epsilon))


def hopf_cole_roundtrip(sol: MFGSolution, u: ScalarField | None = None) -> float:
    """Max-norm Choquard residual of v = exp(-u / (2 eps)) at the MFG multiplier."""
    problem = ChoquardProblem(sol.spec)
    values = sol.u.flat if u is None else u.flat
    v = problem.normalize(np.exp(-(values - np.min(values)) / (2.0 * sol.spec.epsilon)))
    return problem.residual(v, sol.lambda_)
