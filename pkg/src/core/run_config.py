"""
Run-level parameters read from a strict key=value document.

One assignment per line, `#` starts a comment, blank lines are skipped. Every
key must be a RunConfig field; numbers must parse to finite values. Syntax
problems raise ConfigError naming the line; semantic ones (for example an
alpha outside the mass-subcritical window) raise SpecValidationError.
"""

import math
from pathlib import Path
from typing import Any, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from src.core.errors import ConfigError, SpecValidationError
from src.grid.grid import GridSpec
from src.model.problem import PotentialKind, PotentialSpec, ProblemSpec, Well

INT_KEYS = {"dim", "points", "rungs", "max_outer", "seed"}
TEXT_KEYS = {"potential", "wells", "potential_center", "output_dir"}


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # problem
    dim: int = Field(default=1, description="Space dimension (1 or 2)")
    gamma: float = Field(default=2.0, description="Hamiltonian exponent, > 1")
    alpha: float = Field(default=0.5, description="Riesz exponent, N - g' < alpha < N")
    mass: float = Field(default=1.0, description="Total mass M")
    epsilon: float = Field(default=1.0, description="Viscosity for single solves")
    coupling: float = Field(default=1.0, description="Weight of the Riesz interaction")
    potential: PotentialKind = Field(default=PotentialKind.SHIFTED_POWER, description="Potential family")
    potential_b: float = Field(default=2.0, description="Power potential exponent b")
    potential_cv: float = Field(default=1.0, description="Growth constant C_V")
    potential_center: tuple[float, ...] = Field(default=(0.3,), description="Minimizer of the shifted power")
    potential_scale: float = Field(default=1.0, description="Prefactor of power and multi-well potentials")
    wells: tuple[tuple[tuple[float, ...], float], ...] = Field(
        default=(), description="Multi-well centers and exponents, `center:b; center:b`"
    )

    # grid
    half_width: float = Field(default=8.0, description="Box [-R, R]^N")
    points: int = Field(default=513, description="Nodes per axis")

    # sweep
    eps0: float = Field(default=1.0, description="First rung of the geometric ladder")
    rungs: int = Field(default=7, description="Number of rungs eps0 * 2^-k")
    radius: float = Field(default=6.0, description="Concentration ball radius in rescaled units")
    eta: float = Field(default=0.05, description="Allowed mass outside the concentration ball")
    fit_max_epsilon: float = Field(default=0.25, description="Largest eps used by the scaling fits")
    subadditivity_epsilon: float = Field(default=0.125, description="eps of the sub-additivity probe")

    # solver
    damping: float = Field(default=0.5, description="Picard relaxation weight")
    tol: float = Field(default=1e-8, description="Fixed point L1 tolerance relative to the mass")
    max_outer: int = Field(default=200, description="Maximum outer iterations")

    # run
    seed: int = Field(default=0, ge=0, description="Seed for randomized property checks")
    output_dir: Optional[Path] = Field(default=None, description="Run directory (defaults under OUTPUT_ROOT)")

    @field_validator("potential")
    @classmethod
    def _text_potential(cls, value: PotentialKind) -> PotentialKind:
        if value is PotentialKind.CUSTOM_TABLE:
            raise ValueError("custom_table potentials cannot be given in a config document")
        return value

    @field_validator("rungs", "points", "max_outer")
    @classmethod
    def _positive_count(cls, value: int) -> int:
        if value < 1:
            raise ValueError("must be at least 1")
        return value

    @field_validator("damping")
    @classmethod
    def _damping_range(cls, value: float) -> float:
        if not 0.0 < value <= 1.0:
            raise ValueError("damping must lie in (0, 1]")
        return value

    def grid(self) -> GridSpec:
        return GridSpec(dim=self.dim, half_width=self.half_width, points_per_axis=self.points)

    def potential_spec(self) -> PotentialSpec:
        center = self.potential_center
        if len(center) == 1 and self.dim > 1:
            center = center * self.dim
        if self.potential is PotentialKind.POWER:
            center = (0.0,) * self.dim
        wells = tuple(Well(c, b) for c, b in self.wells)
        return PotentialSpec(
            kind=self.potential,
            b=self.potential_b,
            C_V=self.potential_cv,
            center=center,
            scale=self.potential_scale,
            wells=wells,
        )

    def problem_spec(self, **overrides: Any) -> ProblemSpec:
        spec = ProblemSpec(
            dim=self.dim,
            gamma=self.gamma,
            alpha=self.alpha,
            mass=self.mass,
            epsilon=self.epsilon,
            potential=self.potential_spec(),
            grid=self.grid(),
            coupling=self.coupling,
        )
        return spec.with_changes(**overrides) if overrides else spec

    def ladder(self) -> list[float]:
        return [self.eps0 * 2.0 ** (-k) for k in range(self.rungs)]

    def to_text(self) -> str:
        """Key=value rendering that parse_config reads back to an equal config."""
        lines = []
        for key, value in self.model_dump().items():
            if value is None or (key == "wells" and not value):
                continue
            lines.append(f"{key} = {_render(key, value)}")
        return "\n".join(lines) + "\n"


def _render(key: str, value: Any) -> str:
    if key == "potential":
        return PotentialKind(value).value
    if key == "potential_center":
        return ", ".join(repr(float(c)) for c in value)
    if key == "wells":
        return "; ".join(",".join(repr(float(c)) for c in center) + f":{float(b)!r}" for center, b in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _number(text: str, integer: bool, line_number: int) -> float | int:
    try:
        value = float(text)
    except ValueError:
        raise ConfigError(f"unparsable number {text!r}", line_number) from None
    if not math.isfinite(value):
        raise ConfigError(f"number {text!r} is not finite", line_number)
    if integer:
        if value != int(value):
            raise ConfigError(f"expected an integer, got {text!r}", line_number)
        return int(value)
    return value


def _coordinates(text: str, line_number: int) -> tuple[float, ...]:
    return tuple(float(_number(part.strip(), False, line_number)) for part in text.split(","))


def _wells(text: str, line_number: int) -> tuple[tuple[tuple[float, ...], float], ...]:
    wells = []
    for item in filter(None, (part.strip() for part in text.split(";"))):
        center, sep, b = item.rpartition(":")
        if not sep:
            raise ConfigError(f"well {item!r} must read center:b", line_number)
        wells.append((_coordinates(center, line_number), float(_number(b.strip(), False, line_number))))
    return tuple(wells)


def _parse_value(key: str, text: str, line_number: int) -> Any:
    if key == "potential_center":
        return _coordinates(text, line_number)
    if key == "wells":
        return _wells(text, line_number)
    if key in TEXT_KEYS:
        return text
    return _number(text, key in INT_KEYS, line_number)


def parse_config(text: str) -> RunConfig:
    values: dict[str, Any] = {}
    for line_number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"expected key = value, got {raw.strip()!r}", line_number)
        if key not in RunConfig.model_fields:
            raise ConfigError(f"unknown key {key!r}", line_number)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line_number)
        if not value:
            raise ConfigError(f"missing value for {key!r}", line_number)
        values[key] = _parse_value(key, value, line_number)

    try:
        config = RunConfig(**values)
    except ValidationError as exc:
        raise SpecValidationError(_summarize(exc)) from exc
    # build the problem once so that window and dimension checks fail here
    config.problem_spec()
    return config


def _summarize(exc: ValidationError) -> str:
    parts = []
    for error in exc.errors():
        where = ".".join(str(p) for p in error["loc"])
        parts.append(f"{where}: {error['msg']}")
    return "; ".join(parts)


def load_config(path: Optional[Path]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config(text)
