"""
Free-space convolution with the Riesz kernel K(x) = |x|^(alpha - N).

The kernel is tabulated on every node offset of the doubled grid and its
transform is kept with the table, so a convolution costs one forward and one
inverse real FFT of the zero-padded input. Densities enter with their
trapezoid weights, which makes the bilinear form <a, K*b> symmetric.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray
from scipy import fft
from scipy.integrate import quad

from src.core.errors import GridMismatchError, SpecValidationError
from src.grid.grid import GridSpec, ScalarField, integrate, lebesgue_norm, operators


def origin_cell_average(grid: GridSpec, alpha: float) -> float:
    """Mean of |y|^(alpha - N) over the cell [-h/2, h/2]^N around the origin."""
    h = grid.spacing
    if grid.dim == 1:
        return h ** (alpha - 1.0) * 2.0 ** (1.0 - alpha) / alpha
    # eight triangles of the unit square in polar form, radius up to 1/(2 cos t)
    integral, _ = quad(lambda t: (2.0 * np.cos(t)) ** (-alpha), 0.0, np.pi / 4.0, epsabs=1e-14, epsrel=1e-13)
    return h ** (alpha - 2.0) * 8.0 * integral / alpha


@dataclass(frozen=True)
class RieszKernelTable:
    alpha: float
    grid: GridSpec
    cell_values: NDArray[np.float64] = field(repr=False)
    origin_value: float
    padded_shape: tuple[int, ...]
    transform: NDArray[np.complex128] = field(repr=False)

    def value_at_offset(self, offset: tuple[int, ...]) -> float:
        n = self.grid.points_per_axis
        return float(self.cell_values[tuple(n - 1 + k for k in offset)])


@lru_cache(maxsize=16)
def tabulate_kernel(grid: GridSpec, alpha: float) -> RieszKernelTable:
    if not 0.0 < alpha < grid.dim:
        raise SpecValidationError(f"alpha must lie in (0, {grid.dim}), got {alpha}")

    n, h = grid.points_per_axis, grid.spacing
    offsets = np.arange(-(n - 1), n) * h
    mesh = np.meshgrid(*([offsets] * grid.dim), indexing="ij")
    r = np.sqrt(sum(x**2 for x in mesh))
    table = np.empty_like(r)
    nonzero = r > 0
    table[nonzero] = r[nonzero] ** (alpha - grid.dim)
    origin = origin_cell_average(grid, alpha)
    table[~nonzero] = origin
    table.setflags(write=False)

    padded = tuple(fft.next_fast_len(3 * n - 2, real=True) for _ in range(grid.dim))
    transform = fft.rfftn(table, s=padded)
    return RieszKernelTable(alpha, grid, table, origin, padded, transform)


def convolve(kernel: RieszKernelTable, m: ScalarField) -> ScalarField:
    """(K * m)(x_i) = sum_j K(x_i - x_j) w_j m_j, linear and non-circular."""
    if kernel.grid != m.grid:
        raise GridMismatchError("kernel table and density live on different grids")

    grid = m.grid
    n = grid.points_per_axis
    weighted = (operators(grid).weights * m.flat).reshape(grid.shape)
    full = fft.irfftn(fft.rfftn(weighted, s=kernel.padded_shape) * kernel.transform, s=kernel.padded_shape)
    window = tuple(slice(n - 1, 2 * n - 1) for _ in range(grid.dim))
    return ScalarField(grid, full[window], name=f"K*{m.name}")


def _check_density(m: ScalarField) -> None:
    if np.min(m.values) < -1e-12:
        raise ValueError(f"density has negative entries (min {np.min(m.values):.3e})")


def interaction_energy(kernel: RieszKernelTable, m: ScalarField) -> float:
    """Double integral of m(x) m(y) K(x - y)."""
    _check_density(m)
    return integrate(m.with_values(m.values * convolve(kernel, m).values))


def cross_interaction(kernel: RieszKernelTable, m: ScalarField, frozen: ScalarField) -> float:
    """Double integral of m(x) frozen(y) K(x - y); linear in both arguments."""
    _check_density(m)
    return integrate(m.with_values(m.values * convolve(kernel, frozen).values))


def direct_interaction_energy(kernel: RieszKernelTable, m: ScalarField) -> float:
    """O(n^2) double sum with the same weights and origin cell; reference for small grids."""
    grid = m.grid
    nodes = grid.nodes()
    wm = operators(grid).weights * m.flat
    total = 0.0
    for i in range(grid.size):
        d = np.sqrt(np.sum((nodes - nodes[i]) ** 2, axis=1))
        k = np.where(d > 0, np.power(np.where(d > 0, d, 1.0), kernel.alpha - grid.dim), kernel.origin_value)
        total += wm[i] * float(k @ wm)
    return total


def hls_ratio(kernel: RieszKernelTable, m: ScalarField) -> float:
    """Interaction energy over ||m||^2 in L^(2N/(N+alpha)); bounded by the HLS constant."""
    p = 2.0 * m.grid.dim / (m.grid.dim + kernel.alpha)
    norm = lebesgue_norm(m, p)
    if norm == 0.0:
        return 0.0
    return interaction_energy(kernel, m) / norm**2
