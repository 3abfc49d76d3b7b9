"""
Truncated-box tensor grids, sampled fields and the discrete calculus shared by
every solver.

All operators are assembled once per grid as sparse matrices and reused, so the
HJB transport operator, the Fokker-Planck generator and the field-level calculus
below are built from the very same stencils:

    laplacian    (2N+1)-point stencil, mirror (homogeneous Neumann) ghosts
    D-, D+       one-sided differences, zero on the outward boundary row
                 (state constraint: no exterior data enters)
    weights      tensor-product trapezoid weights; the mirror Laplacian is
                 self-adjoint in the weighted inner product

Vector fields carry two one-sided slots per axis ("backward" pairs with D-,
"forward" with D+). The nodal vector is their sum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp
from numpy.typing import NDArray
from scipy.interpolate import RegularGridInterpolator

from src.core.errors import GridMismatchError, SpecValidationError

# node-index distance below which an interpolation point is read off the node
NODE_SNAP = 1e-9


class UpwindBias(str, Enum):
    """Which one-sided difference lands in which slot."""

    FORWARD = "forward"
    BACKWARD = "backward"
    # HJB switch: backward slot max(D-u, 0), forward slot min(D+u, 0)
    MONOTONE = "monotone"
    # flux switch: rightward values pair with D+, leftward with D-
    TRANSPORT = "transport"


@dataclass(frozen=True)
class GridSpec:
    """Uniform tensor grid on [-half_width, half_width]^dim."""

    dim: int
    half_width: float
    points_per_axis: int

    def __post_init__(self) -> None:
        if self.dim not in (1, 2):
            raise SpecValidationError(f"dim must be 1 or 2, got {self.dim}")
        if self.points_per_axis < 16:
            raise SpecValidationError(f"points_per_axis must be >= 16, got {self.points_per_axis}")
        if not np.isfinite(self.half_width) or self.half_width <= 0:
            raise SpecValidationError(f"half_width must be positive, got {self.half_width}")

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / (self.points_per_axis - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.points_per_axis,) * self.dim

    @property
    def size(self) -> int:
        return self.points_per_axis**self.dim

    @property
    def cell_volume(self) -> float:
        return self.spacing**self.dim

    @property
    def axis(self) -> NDArray[np.float64]:
        """Node coordinates x_i = -R + i*h along one axis."""
        i = np.arange(self.points_per_axis, dtype=np.float64)
        return -self.half_width + i * self.spacing

    def mesh(self) -> tuple[NDArray[np.float64], ...]:
        return tuple(np.meshgrid(*([self.axis] * self.dim), indexing="ij"))

    def radius(self, center: Sequence[float] | None = None) -> NDArray[np.float64]:
        mesh = self.mesh()
        c = np.zeros(self.dim) if center is None else np.asarray(center, dtype=np.float64)
        return np.sqrt(sum((x - ck) ** 2 for x, ck in zip(mesh, c)))

    def nodes(self) -> NDArray[np.float64]:
        """All node coordinates as an (size, dim) array in row-major order."""
        return np.stack([x.ravel() for x in self.mesh()], axis=1)

    def node(self, index: Sequence[int] | int) -> NDArray[np.float64]:
        idx = np.unravel_index(index, self.shape) if np.isscalar(index) else tuple(index)
        return np.array([self.axis[i] for i in idx], dtype=np.float64)

    def boundary_mask(self) -> NDArray[np.bool_]:
        mask = np.zeros(self.shape, dtype=bool)
        for k in range(self.dim):
            edge = [slice(None)] * self.dim
            edge[k] = 0
            mask[tuple(edge)] = True
            edge[k] = -1
            mask[tuple(edge)] = True
        return mask


def _frozen(values: NDArray) -> NDArray[np.float64]:
    arr = np.array(values, dtype=np.float64, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ScalarField:
    grid: GridSpec
    values: NDArray[np.float64] = field(repr=False)
    name: str = "field"

    def __post_init__(self) -> None:
        values = np.asarray(self.values, dtype=np.float64)
        if values.size != self.grid.size:
            raise GridMismatchError(f"{values.size} values for a grid of {self.grid.size} nodes")
        values = values.reshape(self.grid.shape)
        if not np.all(np.isfinite(values)):
            raise ValueError(f"{self.name}: non-finite values")
        object.__setattr__(self, "values", _frozen(values))

    @classmethod
    def zeros(cls, grid: GridSpec, name: str = "field") -> "ScalarField":
        return cls(grid, np.zeros(grid.shape), name)

    @classmethod
    def from_function(
        cls, grid: GridSpec, fn: Callable[..., NDArray], name: str = "field"
    ) -> "ScalarField":
        """Sample fn(x0, ..., x_{N-1}) on the node mesh."""
        return cls(grid, np.broadcast_to(fn(*grid.mesh()), grid.shape), name)

    @property
    def flat(self) -> NDArray[np.float64]:
        return self.values.ravel()

    def with_values(self, values: NDArray, name: str | None = None) -> "ScalarField":
        return ScalarField(self.grid, values, name or self.name)

    def argmin(self) -> tuple[int, ...]:
        """Grid argmin; ties go to the smallest lexicographic coordinate."""
        flat = self.flat
        return tuple(int(i) for i in np.unravel_index(int(np.argmin(flat)), self.grid.shape))


@dataclass(frozen=True)
class VectorField:
    """Per-axis one-sided slots, arrays of shape (dim, *grid.shape)."""

    grid: GridSpec
    backward: NDArray[np.float64] = field(repr=False)
    forward: NDArray[np.float64] = field(repr=False)

    def __post_init__(self) -> None:
        shape = (self.grid.dim, *self.grid.shape)
        for slot in ("backward", "forward"):
            arr = np.asarray(getattr(self, slot), dtype=np.float64)
            if arr.size != int(np.prod(shape)):
                raise GridMismatchError(f"{slot} slot has {arr.size} entries, expected {shape}")
            arr = arr.reshape(shape)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"vector field {slot} slot has non-finite values")
            object.__setattr__(self, slot, _frozen(arr))

    @classmethod
    def zeros(cls, grid: GridSpec) -> "VectorField":
        shape = (grid.dim, *grid.shape)
        return cls(grid, np.zeros(shape), np.zeros(shape))

    @property
    def components(self) -> NDArray[np.float64]:
        return self.backward + self.forward

    def magnitude(self) -> NDArray[np.float64]:
        return np.sqrt(np.sum(self.backward**2 + self.forward**2, axis=0))

    def scaled(self, factor: float | NDArray) -> "VectorField":
        """Multiply both slots by a scalar or a nodal array."""
        return VectorField(self.grid, self.backward * factor, self.forward * factor)

    def __add__(self, other: "VectorField") -> "VectorField":
        _check_same_grid(self.grid, other.grid)
        return VectorField(self.grid, self.backward + other.backward, self.forward + other.forward)


def _check_same_grid(a: GridSpec, b: GridSpec) -> None:
    if a != b:
        raise GridMismatchError(f"grid mismatch: {a} vs {b}")


@dataclass(frozen=True)
class GridOperators:
    weights: NDArray[np.float64]
    laplacian: sp.csr_matrix
    backward: tuple[sp.csr_matrix, ...]
    forward: tuple[sp.csr_matrix, ...]
    # h / (1D trapezoid weight) along each axis: 1 inside, 2 on that axis's faces
    edge_factor: tuple[NDArray[np.float64], ...]


def _axis_operators(n: int, h: float) -> tuple[sp.csr_matrix, sp.csr_matrix, sp.csr_matrix]:
    main = np.full(n, -2.0)
    upper = np.ones(n - 1)
    lower = np.ones(n - 1)
    upper[0] = 2.0
    lower[-1] = 2.0
    lap = sp.diags([lower, main, upper], [-1, 0, 1], format="csr") / h**2

    bwd_main = np.ones(n)
    bwd_main[0] = 0.0
    bwd = sp.diags([-np.ones(n - 1), bwd_main], [-1, 0], format="csr")
    fwd_main = -np.ones(n)
    fwd_main[-1] = 0.0
    fwd = sp.diags([fwd_main, np.ones(n - 1)], [0, 1], format="csr")
    return lap, bwd / h, fwd / h


@lru_cache(maxsize=32)
def operators(grid: GridSpec) -> GridOperators:
    n, h = grid.points_per_axis, grid.spacing
    lap1, bwd1, fwd1 = _axis_operators(n, h)
    w1 = np.full(n, h)
    w1[[0, -1]] = h / 2.0
    factor1 = h / w1

    eye = sp.identity(n, format="csr")
    if grid.dim == 1:
        weights = w1
        lap = lap1
        backward = (bwd1,)
        forward = (fwd1,)
        edge_factor = (factor1,)
    else:
        weights = np.outer(w1, w1).ravel()
        lap = (sp.kron(lap1, eye) + sp.kron(eye, lap1)).tocsr()
        backward = (sp.kron(bwd1, eye).tocsr(), sp.kron(eye, bwd1).tocsr())
        forward = (sp.kron(fwd1, eye).tocsr(), sp.kron(eye, fwd1).tocsr())
        ones = np.ones(n)
        edge_factor = (np.outer(factor1, ones).ravel(), np.outer(ones, factor1).ravel())

    weights.setflags(write=False)
    return GridOperators(weights, lap, backward, forward, edge_factor)


def integrate(f: ScalarField) -> float:
    """Trapezoidal quadrature over the box."""
    return float(operators(f.grid).weights @ f.flat)


def inner(f: ScalarField, g: ScalarField) -> float:
    _check_same_grid(f.grid, g.grid)
    return float(operators(f.grid).weights @ (f.flat * g.flat))


def lebesgue_norm(f: ScalarField, p: float) -> float:
    return integrate(f.with_values(np.abs(f.values) ** p)) ** (1.0 / p)


def one_sided_differences(u: ScalarField) -> tuple[NDArray[np.float64], NDArray[np.float64]]:
    """Raw (D-u, D+u) stacked per axis, shape (dim, *shape) each."""
    ops = operators(u.grid)
    shape = (u.grid.dim, *u.grid.shape)
    dm = np.stack([d @ u.flat for d in ops.backward]).reshape(shape)
    dp = np.stack([d @ u.flat for d in ops.forward]).reshape(shape)
    return dm, dp


def gradient_upwind(u: ScalarField, bias: UpwindBias = UpwindBias.MONOTONE) -> VectorField:
    dm, dp = one_sided_differences(u)
    zero = np.zeros_like(dm)
    if bias is UpwindBias.FORWARD:
        return VectorField(u.grid, zero, dp)
    if bias is UpwindBias.BACKWARD:
        return VectorField(u.grid, dm, zero)
    if bias is UpwindBias.MONOTONE:
        return VectorField(u.grid, np.maximum(dm, 0.0), np.minimum(dp, 0.0))
    return VectorField(u.grid, np.minimum(dm, 0.0), np.maximum(dp, 0.0))


def laplacian(f: ScalarField) -> ScalarField:
    return f.with_values(operators(f.grid).laplacian @ f.flat, name=f"lap_{f.name}")


def pairing(w: VectorField, phi: ScalarField) -> float:
    """<w, grad phi> with each slot paired with its own one-sided difference."""
    _check_same_grid(w.grid, phi.grid)
    ops = operators(phi.grid)
    total = 0.0
    for k in range(phi.grid.dim):
        total += ops.weights @ (w.backward[k].ravel() * (ops.backward[k] @ phi.flat))
        total += ops.weights @ (w.forward[k].ravel() * (ops.forward[k] @ phi.flat))
    return float(total)


def divergence(w: VectorField) -> ScalarField:
    """Negative weighted adjoint of the slot gradient: <div w, phi> = -<w, grad phi>."""
    ops = operators(w.grid)
    acc = np.zeros(w.grid.size)
    for k in range(w.grid.dim):
        acc += ops.backward[k].T @ (ops.weights * w.backward[k].ravel())
        acc += ops.forward[k].T @ (ops.weights * w.forward[k].ravel())
    return ScalarField(w.grid, -acc / ops.weights, name="div")


def boundary_ratio(f: ScalarField) -> float:
    """max |f| over boundary nodes divided by max |f| overall (0 for the zero field)."""
    peak = float(np.max(np.abs(f.values)))
    if peak == 0.0:
        return 0.0
    return float(np.max(np.abs(f.values[f.grid.boundary_mask()]))) / peak


def interpolate(
    f: ScalarField,
    points: NDArray[np.float64],
    fill_value: float | None = 0.0,
) -> NDArray[np.float64]:
    """Cubic interpolation at (k, dim) points; outside the box uses fill_value (None extrapolates).

    Points that coincide with nodes return the nodal values exactly.
    """
    grid = f.grid
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    index = (pts + grid.half_width) / grid.spacing
    nearest = np.rint(index)
    on_node = np.all(
        (np.abs(index - nearest) <= NODE_SNAP) & (nearest >= 0) & (nearest <= grid.points_per_axis - 1), axis=1
    )
    out = np.empty(pts.shape[0])
    if np.any(on_node):
        out[on_node] = f.values[tuple(nearest[on_node].astype(int).T)]
    if not np.all(on_node):
        interp = RegularGridInterpolator(
            (grid.axis,) * grid.dim, f.values, method="cubic", bounds_error=False, fill_value=fill_value
        )
        out[~on_node] = interp(pts[~on_node])
    return out


def resample(
    f: ScalarField,
    target: GridSpec,
    coordinate_map: Callable[[NDArray[np.float64]], NDArray[np.float64]],
    fill_value: float | None = 0.0,
    name: str | None = None,
) -> ScalarField:
    """Sample f at coordinate_map(target nodes) onto the target grid."""
    values = interpolate(f, coordinate_map(target.nodes()), fill_value=fill_value)
    return ScalarField(target, values.reshape(target.shape), name or f.name)
