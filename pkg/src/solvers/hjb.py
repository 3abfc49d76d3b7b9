"""
Ergodic HJB solver: -eps lap u + |grad u|^g / g + lambda = f.

The Hamiltonian is discretized with the monotone switch

    |P|^2 = sum_k max(D-_k u, 0)^2 + min(D+_k u, 0)^2,   H = |P|^g / g,

which is the supremum over controls a- >= 0, a+ <= 0 of
a-.D-u + a+.D+u - |A|^g'/g'. Policy (Howard) iteration freezes the maximizing
controls, solves the bordered linear system for (u, lambda) with one node
pinned, and repeats. The final controls are the upwind switch set that the
Fokker-Planck solve consumes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.sparse.linalg import spsolve

from src.core.config import get_config
from src.core.errors import ConvergenceError
from src.core.logging_setup import get_logger
from src.grid.grid import GridSpec, ScalarField, VectorField, one_sided_differences, operators
from src.model.problem import ProblemSpec
from src.observability.metrics import MetricsTimer, get_metrics_collector

logger = get_logger(__name__)


@dataclass(frozen=True)
class Policy:
    """Frozen controls, arrays of shape (dim, size): backward >= 0, forward <= 0."""

    backward: NDArray[np.float64] = field(repr=False)
    forward: NDArray[np.float64] = field(repr=False)

    def speed(self) -> NDArray[np.float64]:
        return np.sqrt(np.sum(self.backward**2 + self.forward**2, axis=0))

    def cost(self, gamma_conj: float) -> NDArray[np.float64]:
        """|A|^g' / g' per node."""
        return self.speed() ** gamma_conj / gamma_conj


@dataclass(frozen=True)
class ErgodicSolution:
    u: ScalarField
    lambda_: float
    residual: float
    iterations: int
    policy: Policy = field(repr=False)
    trace: tuple[tuple[int, float], ...] = field(default=(), repr=False)


def monotone_policy(spec: ProblemSpec, u: ScalarField) -> tuple[NDArray[np.float64], Policy]:
    """Numerical Hamiltonian per node and its maximizing controls."""
    dm, dp = one_sided_differences(u)
    size = u.grid.size
    back = np.maximum(dm, 0.0).reshape(spec.dim, size)
    fwd = np.minimum(dp, 0.0).reshape(spec.dim, size)
    p = np.sqrt(np.sum(back**2 + fwd**2, axis=0))
    coef = np.zeros_like(p)
    moving = p > 0
    coef[moving] = p[moving] ** (spec.gamma - 2.0)
    ham = p**spec.gamma / spec.gamma
    return ham, Policy(coef * back, coef * fwd)


def transport_matrix(grid: GridSpec, policy: Policy) -> sp.csr_matrix:
    """sum_k diag(a-_k) D-_k + diag(a+_k) D+_k."""
    ops = operators(grid)
    mat = sp.csr_matrix((grid.size, grid.size))
    for k in range(grid.dim):
        mat = mat + sp.diags(policy.backward[k]) @ ops.backward[k] + sp.diags(policy.forward[k]) @ ops.forward[k]
    return mat.tocsr()


def hjb_residual(spec: ProblemSpec, u: ScalarField, lambda_: float, f: ScalarField) -> float:
    ham, _ = monotone_policy(spec, u)
    lap = operators(u.grid).laplacian @ u.flat
    return float(np.max(np.abs(-spec.epsilon * lap + ham + lambda_ - f.flat)))


def _policy_step(spec: ProblemSpec, f: NDArray[np.float64], policy: Policy, pin: int) -> tuple[NDArray, float]:
    grid = spec.grid
    n = grid.size
    ops = operators(grid)
    a = -spec.epsilon * ops.laplacian + transport_matrix(grid, policy)
    ones = sp.csr_matrix(np.ones((n, 1)))
    row = sp.csr_matrix(([1.0], ([0], [pin])), shape=(1, n))
    bordered = sp.bmat([[a, ones], [row, None]], format="csc")
    rhs = np.concatenate([f + policy.cost(spec.gamma_conj), [0.0]])
    sol = spsolve(bordered, rhs)
    u = sol[:n]
    return u - np.min(u), float(sol[n])


def solve_ergodic(
    spec: ProblemSpec,
    f: ScalarField,
    u0: ScalarField | None = None,
    tol: float | None = None,
    max_iters: int | None = None,
) -> ErgodicSolution:
    config = get_config()
    tol = config.HJB_TOL if tol is None else tol
    max_iters = config.HJB_MAX_ITERS if max_iters is None else max_iters
    # scaled by the oscillation of f, which f + c shares
    tol_abs = tol * (1.0 + float(np.ptp(f.values)))

    grid = spec.grid
    forcing = f.flat
    u = np.zeros(grid.size) if u0 is None else u0.flat - np.min(u0.flat)
    lam = 0.0
    residual = float("inf")
    trace: list[tuple[int, float]] = []

    with MetricsTimer("hjb"):
        for iteration in range(1, max_iters + 1):
            field_u = ScalarField(grid, u)
            _, policy = monotone_policy(spec, field_u)
            pin = int(np.argmin(u)) if np.ptp(u) > 0 else int(np.argmin(forcing))
            u_new, lam = _policy_step(spec, forcing, policy, pin)
            if iteration <= config.HJB_DAMPED_STEPS:
                theta = config.HJB_EARLY_DAMPING
                u = (1.0 - theta) * u + theta * u_new
                u -= np.min(u)
            else:
                u = u_new
            residual = hjb_residual(spec, ScalarField(grid, u), lam, f)
            trace.append((iteration, residual))
            logger.debug("hjb_policy_iteration", iteration=iteration, residual=residual, lambda_=lam)
            if residual <= tol_abs:
                break
        else:
            raise ConvergenceError(
                f"policy iteration did not converge in {max_iters} iterations",
                residual=residual,
                iterate=(ScalarField(grid, u, name="u"), lam),
            )

        u_field = ScalarField(grid, u, name="u")
        _, policy = monotone_policy(spec, u_field)

    get_metrics_collector().record_iterations("hjb", iteration)
    logger.debug("hjb_converged", iterations=iteration, residual=residual, lambda_=lam)
    return ErgodicSolution(u_field, lam, residual, iteration, policy, tuple(trace))


def drift_from_policy(grid: GridSpec, policy: Policy) -> VectorField:
    shape = (grid.dim, *grid.shape)
    return VectorField(grid, -policy.backward.reshape(shape), -policy.forward.reshape(shape))


def optimal_drift(spec: ProblemSpec, u: ScalarField) -> VectorField:
    """-grad u |grad u|^(g-2) with the HJB switch set."""
    _, policy = monotone_policy(spec, u)
    return drift_from_policy(spec.grid, policy)
