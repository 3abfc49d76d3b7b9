import time
from datetime import datetime, timezone
from pathlib import Path
from typing import Any
from prometheus_client import Counter, Histogram, Gauge, CollectorRegistry, generate_latest, write_to_textfile
from src.core.logging_setup import get_logger

logger = get_logger(__name__)

ITERATION_BUCKETS = (1, 2, 5, 10, 20, 50, 100, 200, 500, 1000, 2000)

class MetricsCollector:
    def __init__(self):
        self.registry = CollectorRegistry()

        self.solves_total = Counter(
            "mfglab_solves_total",
            "Total number of solver invocations",
            ["solver", "status"],
            registry=self.registry
        )

        self.solve_duration = Histogram(
            "mfglab_solve_duration_seconds",
            "Solver wall time in seconds",
            ["solver"],
            registry=self.registry
        )

        self.solver_iterations = Histogram(
            "mfglab_solver_iterations",
            "Iterations used by a converged solve",
            ["solver"],
            buckets=ITERATION_BUCKETS,
            registry=self.registry
        )

        self.acceptance_checks = Counter(
            "mfglab_acceptance_checks_total",
            "Acceptance checks by outcome",
            ["check", "outcome"],
            registry=self.registry
        )

        self.sweep_rungs = Counter(
            "mfglab_sweep_rungs_total",
            "Completed vanishing-viscosity rungs",
            registry=self.registry
        )

        self.last_lambda = Gauge(
            "mfglab_last_lambda",
            "Ergodic constant of the most recent MFG solve",
            registry=self.registry
        )

        logger.debug("metrics_collector_initialized")

    def record_solve(self, solver: str, status: str):
        self.solves_total.labels(solver=solver, status=status).inc()

    def record_duration(self, solver: str, duration: float):
        self.solve_duration.labels(solver=solver).observe(duration)

    def record_iterations(self, solver: str, iterations: int):
        self.solver_iterations.labels(solver=solver).observe(iterations)

    def record_check(self, check: str, passed: bool):
        self.acceptance_checks.labels(check=check, outcome="pass" if passed else "fail").inc()

    def record_rung(self):
        self.sweep_rungs.inc()

    def set_last_lambda(self, value: float):
        self.last_lambda.set(value)

    def solve_count(self, solver: str, status: str = "converged") -> float:
        return self.solves_total.labels(solver=solver, status=status)._value.get()

    def get_metrics(self) -> bytes:
        return generate_latest(self.registry)

    def write_textfile(self, path: Path) -> None:
        write_to_textfile(str(path), self.registry)

    def get_summary(self) -> dict[str, Any]:
        solves: dict[str, float] = {}
        for metric in self.solves_total.collect():
            for sample in metric.samples:
                if sample.name.endswith("_total"):
                    key = f"{sample.labels['solver']}:{sample.labels['status']}"
                    solves[key] = sample.value
        return {
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "solves": solves,
            "last_lambda": self.last_lambda._value.get(),
        }

_metrics_collector: MetricsCollector | None = None

def get_metrics_collector() -> MetricsCollector:
    global _metrics_collector
    if _metrics_collector is None:
        _metrics_collector = MetricsCollector()
    return _metrics_collector

def reset_metrics_collector() -> None:
    global _metrics_collector
    _metrics_collector = None

class MetricsTimer:
    def __init__(self, solver: str, metrics_collector: MetricsCollector | None = None):
        self.solver = solver
        self.metrics_collector = metrics_collector or get_metrics_collector()
        self.start_time = None
        self.duration = 0.0

    def __enter__(self):
        self.start_time = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self.start_time is not None:
            self.duration = time.perf_counter() - self.start_time
            self.metrics_collector.record_duration(self.solver, self.duration)
            self.metrics_collector.record_solve(self.solver, "failed" if exc_type else "converged")
