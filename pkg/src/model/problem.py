from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional

import numpy as np
from numpy.typing import NDArray

from src.core.errors import GridMismatchError, SpecValidationError
from src.coupling.riesz import RieszKernelTable, tabulate_kernel
from src.grid.grid import GridSpec, ScalarField, interpolate


class PotentialKind(str, Enum):
    ZERO = "zero"
    POWER = "power"
    SHIFTED_POWER = "shifted_power"
    MULTI_WELL = "multi_well"
    CUSTOM_TABLE = "custom_table"


GROWTH_CHECKED = (PotentialKind.POWER, PotentialKind.SHIFTED_POWER, PotentialKind.MULTI_WELL)


@dataclass(frozen=True)
class Well:
    center: tuple[float, ...]
    b: float


@dataclass(frozen=True)
class PotentialSpec:
    kind: PotentialKind = PotentialKind.ZERO
    b: float = 2.0
    C_V: float = 1.0
    center: tuple[float, ...] = (0.0,)
    scale: float = 1.0
    wells: tuple[Well, ...] = ()
    table: Optional[ScalarField] = field(default=None, compare=False, repr=False)

    def __post_init__(self) -> None:
        kind = PotentialKind(self.kind)
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        if kind in (PotentialKind.POWER, PotentialKind.SHIFTED_POWER):
            if self.b <= 0 or self.C_V <= 0 or self.scale <= 0:
                raise SpecValidationError("power potentials need b > 0, C_V > 0 and scale > 0")
        if kind is PotentialKind.POWER and any(c != 0.0 for c in self.center):
            raise SpecValidationError("kind=power is centered at the origin; use shifted_power")
        if kind is PotentialKind.MULTI_WELL:
            if len(self.wells) < 1 or any(w.b <= 0 for w in self.wells) or self.scale <= 0:
                raise SpecValidationError("multi_well needs at least one well with b > 0 and scale > 0")
        if kind is PotentialKind.CUSTOM_TABLE:
            if self.table is None:
                raise SpecValidationError("custom_table potential needs a table")
            if np.min(self.table.values) < 0:
                raise SpecValidationError("tabulated potential must be nonnegative")

    @property
    def growth(self) -> float:
        """Growth exponent at infinity (0 for the zero potential)."""
        if self.kind is PotentialKind.ZERO:
            return 0.0
        if self.kind is PotentialKind.MULTI_WELL:
            return float(sum(w.b for w in self.wells))
        return self.b

    def minimizer(self) -> Optional[NDArray[np.float64]]:
        """A point where V vanishes, when one is known in closed form.

        For several wells this is the flattest one (largest b), the point small-viscosity
        solutions select; None when that well is not unique.
        """
        if self.kind in (PotentialKind.POWER, PotentialKind.SHIFTED_POWER):
            return np.asarray(self.center)
        if self.kind is PotentialKind.MULTI_WELL:
            top = max(w.b for w in self.wells)
            flattest = [w for w in self.wells if w.b == top]
            return np.asarray(flattest[0].center) if len(flattest) == 1 else None
        return None

    def evaluate(self, points: NDArray[np.float64]) -> NDArray[np.float64]:
        """V at an (k, dim) array of points."""
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if self.kind is PotentialKind.ZERO:
            return np.zeros(pts.shape[0])
        if self.kind in (PotentialKind.POWER, PotentialKind.SHIFTED_POWER):
            c = np.asarray(self.center)
            return self.scale * np.linalg.norm(pts - c, axis=1) ** self.b
        if self.kind is PotentialKind.MULTI_WELL:
            out = np.full(pts.shape[0], self.scale)
            for well in self.wells:
                out *= np.linalg.norm(pts - np.asarray(well.center), axis=1) ** well.b
            return out
        # extrapolation beyond the table keeps the edge trend; clip keeps V >= 0
        return np.maximum(interpolate(self.table, pts, fill_value=None), 0.0)

    def sample(self, grid: GridSpec) -> ScalarField:
        if self.kind is PotentialKind.CUSTOM_TABLE and self.table.grid == grid:
            return self.table.with_values(self.table.values, name="V")
        return ScalarField(grid, self.evaluate(grid.nodes()).reshape(grid.shape), name="V")

    def growth_bounds_hold(self, points: NDArray[np.float64]) -> bool:
        """C_V^-1 (max(|x| - C_V, 0))^b <= V(x) <= C_V (1 + |x|)^b at the given points."""
        pts = np.atleast_2d(points)
        r = np.linalg.norm(pts, axis=1)
        v = self.evaluate(pts)
        b = self.growth
        lower = np.maximum(r - self.C_V, 0.0) ** b / self.C_V
        upper = self.C_V * (1.0 + r) ** b
        slack = 1e-12
        return bool(np.all(v >= lower * (1.0 - slack) - slack) and np.all(v <= upper * (1.0 + slack) + slack))


@dataclass(frozen=True)
class ProblemSpec:
    dim: int
    gamma: float
    alpha: float
    mass: float
    epsilon: float
    potential: PotentialSpec
    grid: GridSpec
    # weight of the Riesz term; 0 decouples HJB from the density
    coupling: float = 1.0
    gamma_conj: float = field(init=False)

    def __post_init__(self) -> None:
        if not self.gamma > 1.0:
            raise SpecValidationError(f"gamma must exceed 1, got {self.gamma}")
        object.__setattr__(self, "gamma_conj", self.gamma / (self.gamma - 1.0))
        if self.grid.dim != self.dim:
            raise GridMismatchError(f"grid dimension {self.grid.dim} differs from dim={self.dim}")
        if not self.dim - self.gamma_conj < self.alpha < self.dim:
            raise SpecValidationError(
                f"alpha={self.alpha} outside the mass-subcritical window "
                f"({self.dim - self.gamma_conj:.6g}, {self.dim})"
            )
        if not self.mass > 0:
            raise SpecValidationError(f"mass must be positive, got {self.mass}")
        if not self.epsilon > 0:
            raise SpecValidationError(f"epsilon must be positive, got {self.epsilon}")
        if self.coupling < 0:
            raise SpecValidationError(f"coupling must be nonnegative, got {self.coupling}")
        kind = self.potential.kind
        if kind in (PotentialKind.POWER, PotentialKind.SHIFTED_POWER) and len(self.potential.center) != self.dim:
            raise SpecValidationError("potential center dimension differs from dim")
        if kind is PotentialKind.MULTI_WELL and any(len(w.center) != self.dim for w in self.potential.wells):
            raise SpecValidationError("well center dimension differs from dim")
        if kind in GROWTH_CHECKED and not self.potential.growth_bounds_hold(self.grid.nodes()):
            raise SpecValidationError(
                f"{kind.value} potential leaves the growth envelope of C_V={self.potential.C_V:g} on the box; "
                "raise potential_cv"
            )

    @property
    def kernel(self) -> RieszKernelTable:
        return tabulate_kernel(self.grid, self.alpha)

    def potential_field(self) -> ScalarField:
        return self.potential.sample(self.grid)

    def with_changes(self, **changes) -> "ProblemSpec":
        changes.pop("gamma_conj", None)
        return replace(self, **changes)

