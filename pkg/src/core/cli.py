import json
import sys
from pathlib import Path
from typing import Any, List, Optional

import numpy as np
import typer
from rich.console import Console
from rich.panel import Panel
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from src.analysis.acceptance import CheckResult, run_battery
from src.analysis.rescaling import (
    exponents,
    frame_residual,
    rescale_solution,
    solution_from_fields,
    unrescale_solution,
)
from src.analysis.sweep import (
    ScalingQuantity,
    concentration_report,
    fit_scaling_exponent,
    run_sweep,
    target_slope,
)
from src.core.config import get_config
from src.core.errors import ConfigError, MFGLabError, SpecValidationError
from src.core.logging_setup import get_logger, new_run_id, set_run_id, setup_logging
from src.core.persistence import append_diagnostics, diagnostic_row, read_field, write_failures, write_field, write_summary
from src.core.run_config import RunConfig, load_config
from src.grid.grid import integrate
from src.observability.metrics import get_metrics_collector
from src.solvers.choquard import solve_choquard
from src.solvers.mfg import MFGSolution, solve_mfg

app = typer.Typer(help="mfglab - stationary mean-field games with Riesz coupling")
console = Console()
logger = get_logger(__name__)

EXIT_FAILED = 1
EXIT_CONFIG = 2

ConfigOption = typer.Option(None, "--config", "-c", help="key=value run configuration")
OutOption = typer.Option(None, "--out", "-o", help="Run directory for artifacts")
SeedOption = typer.Option(None, "--seed", help="Seed for randomized property checks")


class RunContext:
    def __init__(self, command: str, config: RunConfig, out: Path, run_id: str):
        self.command = command
        self.config = config
        self.out = out
        self.run_id = run_id

    @property
    def diagnostics(self) -> Path:
        return self.out / "diagnostics.csv"

    def finish(self, sections: dict[str, dict[str, Any]]) -> None:
        header = {"run_id": self.run_id, "command": self.command, **self.config.model_dump(mode="json")}
        write_summary(self.out / "summary.txt", {"run": header, **sections})
        get_metrics_collector().write_textfile(self.out / "metrics.prom")
        (self.out / "config.txt").write_text(self.config.to_text(), encoding="utf-8")


def _start(command: str, config_path: Optional[Path], out: Optional[Path], seed: Optional[int]) -> RunContext:
    setup_logging()
    run_id = new_run_id()
    set_run_id(run_id)
    try:
        config = load_config(config_path)
        if seed is not None:
            config = config.model_copy(update={"seed": seed})
    except (ConfigError, SpecValidationError) as e:
        logger.error("config_rejected", error=str(e))
        console.print(f"[red]Configuration rejected: {e}[/red]")
        typer.echo(json.dumps([{"check": "config", "detail": str(e)}]))
        sys.exit(EXIT_CONFIG)

    directory = out or config.output_dir or Path(get_config().OUTPUT_ROOT) / f"{command}-{run_id}"
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    logger.info("run_started", command=command, out=str(directory))
    return RunContext(command, config, directory, run_id)


def _fail(ctx: RunContext, failures: list[dict[str, Any]]) -> None:
    write_failures(ctx.out / "failures.json", failures)
    typer.echo(json.dumps(failures, default=str))
    logger.error("run_failed", command=ctx.command, failures=len(failures))
    sys.exit(EXIT_FAILED)


def _guarded(ctx: RunContext, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except SpecValidationError as e:
        console.print(f"[red]Invalid problem: {e}[/red]")
        typer.echo(json.dumps([{"check": ctx.command, "detail": str(e)}]))
        sys.exit(EXIT_CONFIG)
    except MFGLabError as e:
        console.print(f"[red]{ctx.command} failed: {e}[/red]")
        _fail(ctx, [{"check": ctx.command, "error": type(e).__name__, "detail": str(e)}])


def _solution_row(solver: str, sol: MFGSolution) -> dict[str, Any]:
    point = sol.spec.grid.node(sol.u.argmin())
    return {
        "solver": solver,
        "epsilon": sol.epsilon,
        "lambda": sol.lambda_,
        "energy_total": sol.energy.total,
        "energy_kinetic": sol.energy.kinetic,
        "energy_potential": sol.energy.potential,
        "energy_interaction": sol.energy.interaction,
        "concentration_x": float(point[0]),
        "concentration_y": float(point[1]) if len(point) > 1 else None,
        "sup_m_rescaled": sol.epsilon ** exponents(sol.spec).density * float(np.max(sol.m.values)),
        "outer_iterations": sol.outer_iterations,
    }


def _write_solution(ctx: RunContext, sol: MFGSolution, prefix: str = "") -> None:
    write_field(ctx.out, f"{prefix}u", sol.u, "u")
    write_field(ctx.out, f"{prefix}m", sol.m, "m")
    for k in range(sol.spec.dim):
        flux = sol.m.with_values(sol.w.components[k], name=f"w{k}")
        write_field(ctx.out, f"{prefix}w{k}", flux, f"w{k}")


def _solution_table(title: str, rows: list[tuple[str, str]]) -> Table:
    table = Table(title=title, show_header=True, header_style="bold cyan")
    table.add_column("Quantity", style="cyan")
    table.add_column("Value", style="green")
    for name, value in rows:
        table.add_row(name, value)
    return table


@app.command()
def solve(config: Optional[Path] = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption):
    """Solve the MFG system once at the configured epsilon"""

    ctx = _start("solve", config, out, seed)
    cfg = ctx.config
    spec = cfg.problem_spec()
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
        progress.add_task(description=f"Solving at eps={cfg.epsilon:g}...", total=None)
        sol = _guarded(ctx, solve_mfg, spec, damping=cfg.damping, tol=cfg.tol, max_outer=cfg.max_outer)

    _write_solution(ctx, sol)
    append_diagnostics(ctx.diagnostics, [_solution_row("mfg", sol)])
    hjb, fp = frame_residual(sol)
    summary = {
        "lambda": sol.lambda_,
        "energy_total": sol.energy.total,
        "energy_kinetic": sol.energy.kinetic,
        "energy_potential": sol.energy.potential,
        "energy_interaction": sol.energy.interaction,
        "duality_gap": sol.duality_gap,
        "hjb_residual": hjb,
        "continuity_residual": fp,
        "mass": sol.mass,
        "outer_iterations": sol.outer_iterations,
    }
    ctx.finish({"solution": summary})
    console.print(_solution_table("MFG solution", [(k, f"{v:.10g}") for k, v in summary.items()]))


@app.command()
def sweep(config: Optional[Path] = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption):
    """Run the vanishing-viscosity ladder in rescaled frames"""

    ctx = _start("sweep", config, out, seed)
    cfg = ctx.config
    spec = cfg.problem_spec()
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
        progress.add_task(description=f"Sweeping {cfg.rungs} rungs from eps={cfg.eps0:g}...", total=None)
        result = _guarded(
            ctx, run_sweep, spec, cfg.ladder(), cfg.radius, cfg.eta,
            damping=cfg.damping, tol=cfg.tol, max_outer=cfg.max_outer,
        )

    append_diagnostics(ctx.diagnostics, [diagnostic_row("mfg", r) for r in result.records])
    for k, sol in enumerate(result.solutions):
        _write_solution(ctx, sol, prefix=f"rung{k:02d}_")

    sections: dict[str, dict[str, Any]] = {"sweep": {"rungs_completed": len(result), "error": result.error or ""}}
    fits: dict[str, Any] = {"target_slope": target_slope(spec)}
    for quantity in ScalingQuantity:
        try:
            slope, r2 = fit_scaling_exponent(result.records, quantity, cfg.fit_max_epsilon)
            fits[f"{quantity.value}_slope"], fits[f"{quantity.value}_r_squared"] = slope, r2
        except ValueError as e:
            fits[f"{quantity.value}_slope"] = f"unavailable ({e})"
    sections["fits"] = fits
    if len(result) >= 3:
        try:
            report = concentration_report(result.records, spec)
            if report is not None:
                limit, value = report
                sections["concentration"] = {"limit_point": " ".join(format(x, ".17g") for x in limit), "potential": value}
        except MFGLabError as e:
            sections["concentration"] = {"error": str(e)}
    ctx.finish(sections)

    table = Table(title="Sweep", show_header=True, header_style="bold cyan")
    for column in ("eps", "lambda~", "energy", "x_eps", "mass in ball", "tail slope"):
        table.add_column(column)
    for r in result.records:
        table.add_row(
            f"{r.epsilon:.6g}", f"{r.lambda_rescaled:.6g}", f"{r.energy_total:.6g}",
            " ".join(f"{x:.4f}" for x in r.concentration_point), f"{r.mass_in_ball:.6f}", f"{r.tail_slope:.4f}",
        )
    console.print(table)
    if not result.completed:
        _fail(ctx, [{"check": "sweep", "epsilon": result.failed_epsilon, "detail": result.error}])


@app.command()
def choquard(config: Optional[Path] = ConfigOption, out: Optional[Path] = OutOption, seed: Optional[int] = SeedOption):
    """Solve the gamma = 2 problem through the Hopf-Cole ground state"""

    ctx = _start("choquard", config, out, seed)
    spec = ctx.config.problem_spec()
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
        progress.add_task(description="Running normalized gradient flow...", total=None)
        state = _guarded(ctx, solve_choquard, spec)

    write_field(ctx.out, "v", state.v, "v")
    write_field(ctx.out, "m", state.m, "m")
    point = spec.grid.node(state.v.with_values(-state.v.values).argmin())
    append_diagnostics(ctx.diagnostics, [{
        "solver": "choquard",
        "epsilon": spec.epsilon,
        "lambda": state.mu,
        "energy_total": state.energy,
        "concentration_x": float(point[0]),
        "concentration_y": float(point[1]) if len(point) > 1 else None,
        "outer_iterations": state.iterations,
    }])
    summary = {"mu": state.mu, "energy": state.energy, "residual": state.residual, "iterations": state.iterations,
               "mass": integrate(state.m)}
    ctx.finish({"choquard": summary})
    console.print(_solution_table("Choquard ground state", [(k, f"{v:.10g}") for k, v in summary.items()]))


@app.command()
def rescale(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    fields: Optional[Path] = typer.Option(None, "--fields", help="Directory with u.f64 and m.f64 from a solve run"),
    mass_tol: float = typer.Option(1e-6, help="Relative tolerance of rescaled mass"),
    roundtrip_tol: float = typer.Option(1e-3, help="Relative L1 tolerance of the rescale round trip"),
):
    """Check the frame change on a stored (or freshly computed) solution"""

    ctx = _start("rescale", config, out, seed)
    cfg = ctx.config
    spec = cfg.problem_spec()
    if fields is not None:
        try:
            u, m = read_field(fields / "u.f64"), read_field(fields / "m.f64")
        except (OSError, ConfigError, KeyError) as e:
            console.print(f"[red]Cannot read stored fields: {e}[/red]")
            sys.exit(EXIT_CONFIG)
        sol = _guarded(ctx, solution_from_fields, spec.with_changes(grid=u.grid), u, m)
    else:
        sol = _guarded(ctx, solve_mfg, spec, damping=cfg.damping, tol=cfg.tol, max_outer=cfg.max_outer)

    frame = _guarded(ctx, rescale_solution, sol, sol.spec.grid)
    back = _guarded(ctx, unrescale_solution, frame, sol.spec)
    mass_err = abs(integrate(frame.m) - sol.spec.mass) / sol.spec.mass
    roundtrip = integrate(sol.m.with_values(np.abs(back.m.values - sol.m.values))) / sol.spec.mass
    hjb, fp = frame_residual(frame)
    exp = exponents(spec)
    summary = {
        "epsilon": sol.epsilon,
        "space_exponent": exp.space,
        "value_exponent": exp.value,
        "lambda": sol.lambda_,
        "lambda_rescaled": frame.lambda_,
        "rescaled_mass_error": mass_err,
        "roundtrip_l1": roundtrip,
        "rescaled_hjb_residual": hjb,
        "rescaled_continuity_residual": fp,
    }
    ctx.finish({"rescale": summary})
    console.print(_solution_table("Frame change", [(k, f"{v:.6g}") for k, v in summary.items()]))

    failures = []
    if mass_err > mass_tol:
        failures.append({"check": "rescaled_mass", "value": mass_err, "threshold": mass_tol})
    if roundtrip > roundtrip_tol:
        failures.append({"check": "rescale_roundtrip", "value": roundtrip, "threshold": roundtrip_tol})
    if failures:
        _fail(ctx, failures)


@app.command()
def verify(
    config: Optional[Path] = ConfigOption,
    out: Optional[Path] = OutOption,
    seed: Optional[int] = SeedOption,
    check: Optional[List[str]] = typer.Option(None, "--check", help="Run only the named checks"),
):
    """Run the acceptance battery; exit 0 only if every check passes"""

    ctx = _start("verify", config, out, seed)
    console.print(Panel.fit("[bold cyan]mfglab acceptance battery[/bold cyan]", border_style="cyan"))
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
        progress.add_task(description="Running checks...", total=None)
        results: list[CheckResult] = _guarded(ctx, run_battery, ctx.config, check or None)

    table = Table(show_header=True, header_style="bold cyan")
    table.add_column("Check", style="cyan")
    table.add_column("Value")
    table.add_column("Threshold")
    table.add_column("Result")
    for r in results:
        verdict = "[green]✓ PASS[/green]" if r.passed else "[red]✗ FAIL[/red]"
        table.add_row(r.name, f"{r.value:.4g}", f"{r.threshold:.4g}", verdict)
    console.print(table)

    passed = sum(1 for r in results if r.passed)
    ctx.finish({"verify": {"passed": passed, "total": len(results)},
                "checks": {r.name: f"{'pass' if r.passed else 'fail'} {r.value:.6g} ({r.detail})" for r in results}})
    console.print(f"\n[bold]Results:[/bold] {passed}/{len(results)} checks passed")
    failures = [r.as_failure() for r in results if not r.passed]
    if failures:
        _fail(ctx, failures)


if __name__ == "__main__":
    app()
