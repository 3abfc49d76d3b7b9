"""
Stationary Fokker-Planck solve as the principal null vector of the adjoint
generator.

The generator acting on test functions is G = eps lap + sum_k d-_k D-_k +
d+_k D+_k with the drift slots of the HJB controls. It has nonnegative
off-diagonals and zero row sums, so G^T annihilates exactly the stationary
measures mu = weights * m. The null vector is found by inverse power iteration
on (s I - G^T) with a tiny shift s; mass is then sum(mu) = integrate(m).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import splu

from src.core.config import get_config
from src.core.errors import ConvergenceError, NullSpaceError, PositivityLossError
from src.core.logging_setup import get_logger
from src.grid.grid import GridSpec, ScalarField, VectorField, boundary_ratio, operators
from src.model.energy import kinetic_term
from src.model.problem import ProblemSpec
from src.observability.metrics import MetricsTimer, get_metrics_collector

logger = get_logger(__name__)


@dataclass(frozen=True)
class StationaryDensity:
    m: ScalarField
    flux: VectorField
    mass_error: float
    positivity_margin: float
    iterations: int = 0


def generator_matrix(spec: ProblemSpec, drift: VectorField) -> sp.csr_matrix:
    grid = spec.grid
    ops = operators(grid)
    gen = spec.epsilon * ops.laplacian
    for k in range(grid.dim):
        gen = gen + sp.diags(drift.backward[k].ravel()) @ ops.backward[k]
        gen = gen + sp.diags(drift.forward[k].ravel()) @ ops.forward[k]
    return sp.csr_matrix(gen)


def closed_classes(generator: sp.csr_matrix) -> int:
    """Number of closed communicating classes of the jump chain (1 means a unique stationary law)."""
    off = generator.copy()
    off.setdiag(0.0)
    off.eliminate_zeros()
    off.data = (off.data > 0).astype(np.float64)
    off.eliminate_zeros()
    n_comp, labels = connected_components(off, directed=True, connection="strong")
    if n_comp == 1:
        return 1
    # a class is closed when no rate leaves it
    coo = off.tocoo()
    leaving = np.zeros(n_comp, dtype=bool)
    crossing = labels[coo.row] != labels[coo.col]
    leaving[labels[coo.row[crossing]]] = True
    return int(np.count_nonzero(~leaving))


def solve_stationary(
    spec: ProblemSpec,
    drift: VectorField,
    shift: float | None = None,
    max_iters: int | None = None,
    tol: float | None = None,
) -> StationaryDensity:
    config = get_config()
    shift = config.FP_SHIFT if shift is None else shift
    max_iters = config.FP_MAX_ITERS if max_iters is None else max_iters
    tol = config.FP_TOL if tol is None else tol

    grid = spec.grid
    weights = operators(grid).weights
    gen = generator_matrix(spec, drift)

    classes = closed_classes(gen)
    if classes != 1:
        raise NullSpaceError(f"generator has {classes} closed classes; stationary law is not unique", classes)

    sigma = shift * float(np.max(np.abs(gen.diagonal())))
    with MetricsTimer("fokker_planck"):
        lu = splu(sp.csc_matrix(sigma * sp.identity(grid.size) - gen.T))
        mu = weights * (spec.mass / float(np.sum(weights)))
        change = float("inf")
        for iteration in range(1, max_iters + 1):
            nxt = lu.solve(mu)
            nxt = _clamp_roundoff(nxt)
            nxt *= spec.mass / float(np.sum(nxt))
            change = float(np.sum(np.abs(nxt - mu)))
            mu = nxt
            if change <= tol * spec.mass:
                break
        else:
            raise ConvergenceError("inverse power iteration stalled", residual=change, iterate=mu / weights)

    get_metrics_collector().record_iterations("fokker_planck", iteration)
    m_values = (mu / weights).reshape(grid.shape)
    m = ScalarField(grid, m_values, name="m")
    flux = drift.scaled(m_values)
    mass_error = abs(float(np.sum(mu)) - spec.mass) / spec.mass
    ratio = boundary_ratio(m)
    if ratio > config.BOUNDARY_DENSITY_WARN:
        logger.warning("boundary_density_high", ratio=ratio, half_width=grid.half_width)
    logger.debug("fp_converged", iterations=iteration, mass_error=mass_error)
    return StationaryDensity(m, flux, mass_error, float(np.min(m_values)), iteration)


def _clamp_roundoff(mu: np.ndarray) -> np.ndarray:
    scale = float(np.max(np.abs(mu)))
    if scale == 0.0 or not np.all(np.isfinite(mu)):
        raise PositivityLossError("inverse power iterate vanished or overflowed")
    if scale != float(np.max(mu)):
        mu = -mu
        scale = float(np.max(mu))
    negative = mu < 0
    if np.any(mu[negative] < -1e-14 * scale):
        raise PositivityLossError(f"density lost positivity (min {float(np.min(mu)) / scale:.3e} of peak)")
    mu = mu.copy()
    mu[negative] = 0.0
    return mu


def kinetic_energy(spec: ProblemSpec, dens: StationaryDensity) -> float:
    """int m |w/m|^g' / g'."""
    return kinetic_term(spec, dens.m, dens.flux)


def gibbs_density(grid: GridSpec, potential_values: np.ndarray, epsilon: float, mass: float) -> ScalarField:
    """m proportional to exp(-phi/eps) normalized to the given mass."""
    phi = potential_values - np.min(potential_values)
    raw = ScalarField(grid, np.exp(-phi / epsilon))
    weights = operators(grid).weights
    return raw.with_values(mass * raw.values / float(weights @ raw.flat), name="gibbs")
