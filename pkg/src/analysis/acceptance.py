"""
Acceptance battery behind `mfglab verify`.

Each check computes one measured value and compares it with a threshold.
Expensive shared inputs (the reference solve and the eps sweep) are computed
once per battery and reused by every check that needs them. A check that
raises a library error is reported as failed with the error text.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Iterable, Sequence

import numpy as np

from src.analysis.rescaling import exponents
from src.analysis.sweep import (
    ScalingQuantity,
    SweepResult,
    concentration_report,
    fit_scaling_exponent,
    richardson,
    richardson_table,
    run_sweep,
    subadditivity_probe,
    target_slope,
)
from src.core.errors import MFGLabError, SpecValidationError
from src.core.logging_setup import get_logger
from src.core.run_config import RunConfig
from src.coupling.riesz import direct_interaction_energy, interaction_energy, tabulate_kernel
from src.grid.grid import GridSpec, ScalarField, UpwindBias, gradient_upwind, inner, integrate, laplacian, pairing
from src.model.energy import FlowPair, build_test_pair, kinetic_term
from src.model.problem import PotentialKind, ProblemSpec
from src.observability.metrics import get_metrics_collector
from src.solvers.choquard import solve_choquard
from src.solvers.fokker_planck import gibbs_density, solve_stationary
from src.solvers.hjb import optimal_drift, solve_ergodic
from src.solvers.mfg import MFGSolution, solve_mfg

logger = get_logger(__name__)

SQRT2 = float(np.sqrt(2.0))
# h-expansions eliminated on three nested grids: monotone upwind MFG, central Choquard
MFG_ORDERS = (1.0, 2.0)
CHOQUARD_ORDERS = (2.0, 4.0)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float
    threshold: float
    detail: str = ""

    def as_failure(self) -> dict[str, object]:
        return {"check": self.name, "value": self.value, "threshold": self.threshold, "detail": self.detail}


def _check(name: str, value: float, threshold: float, passed: bool, detail: str = "") -> CheckResult:
    return CheckResult(name, bool(passed), float(value), float(threshold), detail)


def refined(grid: GridSpec) -> GridSpec:
    """Same box with the spacing halved (coarse nodes are every other fine node)."""
    return GridSpec(grid.dim, grid.half_width, 2 * grid.points_per_axis - 1)


def coarse_nodes(f: ScalarField, levels: int = 1) -> np.ndarray:
    """Values at the nodes of the grid `levels` halvings coarser."""
    return f.values[(slice(None, None, 2**levels),) * f.grid.dim]


class AcceptanceContext:
    """Shared inputs of one battery run."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.spec = config.problem_spec()

    @cached_property
    def reference(self) -> MFGSolution:
        cfg = self.config
        return solve_mfg(self.spec, damping=cfg.damping, tol=cfg.tol, max_outer=cfg.max_outer)

    @cached_property
    def sweep(self) -> SweepResult:
        cfg = self.config
        return run_sweep(
            self.spec, cfg.ladder(), cfg.radius, cfg.eta, damping=cfg.damping, tol=cfg.tol, max_outer=cfg.max_outer
        )

    def solutions(self) -> list[MFGSolution]:
        return [self.reference, *self.sweep.solutions]

    def quadratic_spec(self) -> ProblemSpec:
        return self.spec.with_changes(gamma=2.0)


def check_duality(ctx: AcceptanceContext) -> list[CheckResult]:
    gaps = [sol.duality_gap for sol in ctx.solutions()]
    worst = max(gaps)
    return [_check("duality_identity", worst, 1e-6, worst <= 1e-6, f"{len(gaps)} solves")]


def check_cross_solver(ctx: AcceptanceContext) -> list[CheckResult]:
    cfg = ctx.config
    specs = [ctx.quadratic_spec()]
    for _ in range(len(MFG_ORDERS)):
        specs.append(specs[-1].with_changes(grid=refined(specs[-1].grid)))
    mfg = [solve_mfg(s, damping=cfg.damping, tol=cfg.tol, max_outer=cfg.max_outer) for s in specs]
    ground = [solve_choquard(s) for s in specs]

    lam = richardson_table([sol.lambda_ for sol in mfg], MFG_ORDERS)
    mu = richardson_table([state.mu for state in ground], CHOQUARD_ORDERS)
    rel = abs(lam - mu) / abs(mu)
    m_mfg = richardson_table([coarse_nodes(sol.m, k) for k, sol in enumerate(mfg)], MFG_ORDERS)
    m_ground = richardson_table([coarse_nodes(state.m, k) for k, state in enumerate(ground)], CHOQUARD_ORDERS)
    l1 = integrate(mfg[0].m.with_values(np.abs(m_mfg - m_ground)))
    detail = f"lambda={lam:.10g} mu={mu:.10g} on {len(specs)} grids"
    return [
        _check("cross_solver_lambda", rel, 1e-4, rel <= 1e-4, detail),
        _check("cross_solver_density", l1, 1e-3, l1 <= 1e-3),
    ]


def _gibbs_error(spec: ProblemSpec) -> float:
    u = ScalarField.from_function(spec.grid, lambda *x: 0.5 * sum(xi**2 for xi in x), name="u")
    dens = solve_stationary(spec, optimal_drift(spec, u))
    exact = gibbs_density(spec.grid, u.values, spec.epsilon, spec.mass)
    return integrate(dens.m.with_values(np.abs(dens.m.values - exact.values)))


def check_gibbs(ctx: AcceptanceContext) -> list[CheckResult]:
    spec = ctx.quadratic_spec()
    coarse = _gibbs_error(spec)
    fine = _gibbs_error(spec.with_changes(grid=refined(spec.grid)))
    ratio = coarse / fine if fine > 0 else float("inf")
    return [_check("gibbs_oracle_order", ratio, 1.6, ratio >= 1.6, f"L1 errors {coarse:.3e} -> {fine:.3e}")]


def check_harmonic(ctx: AcceptanceContext) -> list[CheckResult]:
    spec = ctx.quadratic_spec().with_changes(epsilon=1.0)
    values = []
    for grid in (spec.grid, refined(spec.grid)):
        f = ScalarField.from_function(grid, lambda *x: sum(xi**2 for xi in x), name="f")
        values.append(solve_ergodic(spec.with_changes(grid=grid), f).lambda_)
    target = spec.dim * SQRT2
    err = abs(richardson(*values) - target)
    return [_check("harmonic_lambda", err, 5e-3, err <= 5e-3, f"lambda(h)={values[0]:.8f} lambda(h/2)={values[1]:.8f}")]


def check_riesz(ctx: AcceptanceContext) -> list[CheckResult]:
    spec = ctx.spec.with_changes(grid=GridSpec(ctx.spec.dim, ctx.spec.grid.half_width, 201 if ctx.spec.dim == 1 else 41))
    pair = build_test_pair(spec, 1.0)
    kernel = tabulate_kernel(spec.grid, spec.alpha)
    fast = interaction_energy(kernel, pair.m)
    slow = direct_interaction_energy(kernel, pair.m)
    rel = abs(fast - slow) / abs(slow)
    return [_check("riesz_direct_sum", rel, 1e-8, rel <= 1e-8)]


def check_scaling(ctx: AcceptanceContext) -> list[CheckResult]:
    sweep = ctx.sweep
    target = target_slope(ctx.spec)
    results = []
    for quantity in (ScalingQuantity.ENERGY, ScalingQuantity.LAMBDA):
        slope, r2 = fit_scaling_exponent(sweep.records, quantity, ctx.config.fit_max_epsilon)
        rel = abs(slope - target) / abs(target)
        detail = f"slope={slope:.5f} target={target:.5f} r2={r2:.5f}"
        results.append(_check(f"scaling_{quantity.value}", rel, 0.1, rel <= 0.1 and r2 >= 0.99, detail))
    return results


def check_concentration(ctx: AcceptanceContext) -> list[CheckResult]:
    spec, cfg = ctx.spec, ctx.config
    records = ctx.sweep.records
    small = [r for r in records if r.epsilon <= 0.125 * (1.0 + 1e-12)]
    results = []
    if small:
        worst = min(r.mass_in_ball for r in small)
        results.append(
            _check("concentration_mass", worst, spec.mass - cfg.eta, worst >= spec.mass - cfg.eta, f"{len(small)} rungs")
        )
    report = concentration_report(records, spec)
    if report is None:
        return results
    limit, value = report
    results.append(_check("concentration_potential", value, 1e-3, value <= 1e-3, f"limit={limit.tolist()}"))
    minimizer = spec.potential.minimizer()
    if minimizer is not None:
        eps_min = records[-1].epsilon
        allowed = max(spec.grid.spacing, exponents(spec).length(eps_min))
        dist = float(np.linalg.norm(limit - minimizer))
        results.append(_check("concentration_location", dist, allowed, dist <= allowed))
    return results


def check_subadditivity(ctx: AcceptanceContext) -> list[CheckResult]:
    cfg = ctx.config
    lhs, rhs = subadditivity_probe(ctx.spec, 0.5 * ctx.spec.mass, epsilon=cfg.subadditivity_epsilon)
    margin = rhs - lhs
    floor = 10.0 * cfg.tol * max(1.0, abs(lhs))
    return [_check("subadditivity_margin", margin, floor, margin > floor, f"lhs={lhs:.10g} rhs={rhs:.10g}")]


def adjoint_defect(sol: MFGSolution, fields: Iterable[ScalarField]) -> float:
    """Largest relative defect of eps <m, -lap phi> = <w, grad phi> over the test fields."""
    worst = 0.0
    eps = sol.spec.epsilon
    for phi in fields:
        lap = laplacian(phi)
        lhs = -eps * inner(sol.m, lap)
        rhs = pairing(sol.w, phi)
        scale = eps * inner(sol.m, lap.with_values(np.abs(lap.values)))
        worst = max(worst, abs(lhs - rhs) / max(scale, 1e-300))
    return worst


def check_conservation(ctx: AcceptanceContext) -> list[CheckResult]:
    spec = ctx.spec
    sols = ctx.solutions()
    mass_err = max(abs(sol.mass - sol.spec.mass) / sol.spec.mass for sol in sols)
    min_m = min(float(np.min(sol.m.values)) for sol in sols)
    rng = np.random.default_rng(ctx.config.seed)
    fields = [ScalarField(spec.grid, rng.standard_normal(spec.grid.shape), name="phi") for _ in range(20)]
    defect = adjoint_defect(ctx.reference, fields)
    return [
        _check("mass_conservation", mass_err, 1e-10, mass_err <= 1e-10),
        _check("density_positivity", min_m, 0.0, min_m >= 0.0),
        _check("adjoint_identity", defect, 1e-10, defect <= 1e-10, "20 random test fields"),
    ]


def _hjb_shift(spec: ProblemSpec) -> float:
    grid = GridSpec(spec.dim, spec.grid.half_width, 129 if spec.dim == 1 else 33)
    small = spec.with_changes(grid=grid)
    f = small.potential_field() if small.potential.kind is not PotentialKind.ZERO else ScalarField(grid, grid.radius() ** 2)
    shift = 1.7
    base = solve_ergodic(small, f)
    moved = solve_ergodic(small, f.with_values(f.values + shift))
    d_lam = abs(moved.lambda_ - base.lambda_ - shift) / (1.0 + abs(base.lambda_) + shift)
    d_u = float(np.max(np.abs(moved.u.values - base.u.values))) / (1.0 + float(np.max(base.u.values)))
    return max(d_lam, d_u)


def _polynomial_error(grid: GridSpec) -> float:
    interior = ~grid.boundary_mask()
    linear = ScalarField.from_function(grid, lambda *x: sum((k + 1.0) * xi for k, xi in enumerate(x)))
    quadratic = ScalarField.from_function(grid, lambda *x: sum(xi**2 for xi in x))
    err = 0.0
    for bias in (UpwindBias.FORWARD, UpwindBias.BACKWARD):
        grad = gradient_upwind(linear, bias).components
        for k in range(grid.dim):
            err = max(err, float(np.max(np.abs(grad[k][interior] - (k + 1.0)))))
    lap = laplacian(quadratic).values
    return max(err, float(np.max(np.abs(lap[interior] - 2.0 * grid.dim))))


def _dilation_slope(spec: ProblemSpec) -> float:
    kernel = spec.kernel
    tau = 2.0
    sigmas = np.array([0.5, 0.7071067811865476, 1.0, 1.4142135623730951, 2.0])
    energies = [interaction_energy(kernel, build_test_pair(spec, tau / s).m) for s in sigmas]
    return float(np.polyfit(-np.log(sigmas), np.log(energies), 1)[0])


def _convexity_violation(spec: ProblemSpec, rng: np.random.Generator, samples: int = 100) -> float:
    worst = 0.0
    for _ in range(samples):
        pairs = [
            build_test_pair(spec, float(rng.uniform(0.5, 2.0)), rng.uniform(-1.0, 1.0, spec.dim)) for _ in range(2)
        ]
        t = float(rng.uniform(0.0, 1.0))
        mix = FlowPair(
            pairs[0].m.with_values(t * pairs[0].m.values + (1.0 - t) * pairs[1].m.values),
            pairs[0].w.scaled(t) + pairs[1].w.scaled(1.0 - t),
        )
        k0, k1 = (kinetic_term(spec, p.m, p.w) for p in pairs)
        km = kinetic_term(spec, mix.m, mix.w)
        worst = max(worst, (km - t * k0 - (1.0 - t) * k1) / (abs(k0) + abs(k1)))
    return worst


def check_invariance(ctx: AcceptanceContext) -> list[CheckResult]:
    spec = ctx.spec
    shift = _hjb_shift(spec)
    poly = _polynomial_error(spec.grid)
    slope = _dilation_slope(spec)
    target = spec.dim - spec.alpha
    slope_rel = abs(slope - target) / target
    convex = _convexity_violation(spec, np.random.default_rng(ctx.config.seed))
    return [
        _check("hjb_shift_covariance", shift, 1e-12, shift <= 1e-12),
        _check("polynomial_exactness", poly, 1e-9, poly <= 1e-9),
        _check("interaction_dilation_slope", slope_rel, 0.02, slope_rel <= 0.02, f"slope={slope:.5f}"),
        _check("kinetic_convexity", convex, 1e-12, convex <= 1e-12, "100 random feasible pairs"),
    ]


def check_tail(ctx: AcceptanceContext) -> list[CheckResult]:
    records = ctx.sweep.records
    if not records:
        return [_check("tail_decay", float("nan"), 0.0, False, "no sweep records")]
    worst_slope = max(r.tail_slope for r in records)
    worst_r2 = min(r.tail_r_squared for r in records)
    ok = all(r.tail_slope < 0 and r.tail_r_squared >= 0.95 for r in records)
    return [_check("tail_decay", worst_r2, 0.95, ok, f"max slope {worst_slope:.4g}")]


def check_sweep_completed(ctx: AcceptanceContext) -> list[CheckResult]:
    sweep = ctx.sweep
    return [_check("sweep_completed", len(sweep), len(ctx.config.ladder()), sweep.completed, sweep.error or "")]


CHECKS: dict[str, Callable[[AcceptanceContext], list[CheckResult]]] = {
    "duality": check_duality,
    "cross_solver": check_cross_solver,
    "gibbs": check_gibbs,
    "harmonic": check_harmonic,
    "riesz": check_riesz,
    "sweep": check_sweep_completed,
    "scaling": check_scaling,
    "concentration": check_concentration,
    "subadditivity": check_subadditivity,
    "conservation": check_conservation,
    "invariance": check_invariance,
    "tail": check_tail,
}


def run_battery(config: RunConfig, names: Sequence[str] | None = None) -> list[CheckResult]:
    ctx = AcceptanceContext(config)
    selected = list(CHECKS) if names is None else list(names)
    unknown = [n for n in selected if n not in CHECKS]
    if unknown:
        raise SpecValidationError(f"unknown checks: {unknown}")

    collector = get_metrics_collector()
    results: list[CheckResult] = []
    for name in selected:
        try:
            batch = CHECKS[name](ctx)
        except (MFGLabError, ValueError) as exc:
            logger.error("acceptance_check_errored", check=name, error=str(exc))
            batch = [CheckResult(name, False, float("nan"), float("nan"), f"{type(exc).__name__}: {exc}")]
        for result in batch:
            collector.record_check(result.name, result.passed)
            logger.info("acceptance_check", check=result.name, passed=result.passed, value=result.value)
        results.extend(batch)
    return results
