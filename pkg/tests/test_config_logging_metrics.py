"""
Settings, structured logging and solver metrics.
"""

from pathlib import Path

import numpy as np
import pytest
from structlog.testing import capture_logs

from src.core.config import Config, get_config, reset_config
from src.core.logging_setup import (
    add_run_id,
    clear_run_id,
    get_logger,
    get_run_id,
    new_run_id,
    numpy_to_builtin,
    set_run_id,
    setup_logging,
)
from src.observability.metrics import MetricsTimer, get_metrics_collector, reset_metrics_collector
from src.solvers.choquard import solve_choquard


class TestConfig:
    """Test configuration management."""

    def test_config_singleton(self):
        assert get_config() is get_config()
        first = get_config()
        reset_config()
        assert get_config() is not first

    def test_config_defaults(self):
        config = Config()
        assert config.HJB_TOL > 0
        assert config.DUALITY_TOL == 1e-6
        assert config.CHOQUARD_MIN_STEP == 1e-12
        assert config.MFGLAB_THREADS >= 1

    def test_environment_override(self, monkeypatch):
        monkeypatch.setenv("MFG_MAX_OUTER", "17")
        monkeypatch.setenv("ENVIRONMENT", "ci")
        reset_config()
        config = get_config()
        assert config.MFG_MAX_OUTER == 17
        assert config.is_production()
        assert not config.is_development()

    def test_directory_creation(self, tmp_path):
        config = Config(OUTPUT_ROOT=str(tmp_path / "runs" / "nested"))
        config.ensure_directories()
        assert Path(config.OUTPUT_ROOT).is_dir()


class TestLogging:
    """Test run ids and the structlog pipeline."""

    def teardown_method(self):
        clear_run_id()

    def test_run_id_round_trip(self):
        run_id = new_run_id()
        assert len(run_id) == 12
        set_run_id(run_id)
        assert get_run_id() == run_id
        clear_run_id()
        assert get_run_id() is None

    def test_unbound_run_id(self):
        assert add_run_id(None, "info", {"event": "x"})["run_id"] == "unbound"
        assert add_run_id(None, "info", {"event": "x", "run_id": "abc"})["run_id"] == "abc"

    def test_numpy_values_become_builtins(self):
        raw = {"lam": np.float64(-0.5), "n": np.int64(3), "x": np.array([0.3]), "m": np.zeros(129)}
        event = numpy_to_builtin(None, "info", raw)
        assert event["lam"] == -0.5 and type(event["lam"]) is float
        assert type(event["n"]) is int
        assert event["x"] == [0.3]
        assert event["m"] == "ndarray(shape=(129,))"

    @pytest.mark.parametrize("environment", ["dev", "ci"])
    def test_setup_logging(self, environment):
        setup_logging(environment, "DEBUG")
        get_logger(__name__).debug("logging_configured", environment=environment)

    def test_solver_events(self, spec_1d):
        with capture_logs() as logs:
            solve_choquard(spec_1d.with_changes(coupling=0.0))
        events = [entry for entry in logs if entry["event"] == "choquard_converged"]
        assert len(events) == 1
        assert events[0]["log_level"] == "info"
        assert events[0]["mu"] > 0.0


class TestMetrics:
    """Test the metrics collector and solve timer."""

    def test_collector_singleton(self):
        first = get_metrics_collector()
        assert get_metrics_collector() is first
        reset_metrics_collector()
        assert get_metrics_collector() is not first

    def test_timer_records_outcome(self):
        collector = get_metrics_collector()
        with MetricsTimer("hjb") as timer:
            pass
        with pytest.raises(RuntimeError):
            with MetricsTimer("hjb"):
                raise RuntimeError("boom")
        assert timer.duration >= 0.0
        assert collector.solve_count("hjb") == 1.0
        assert collector.solve_count("hjb", "failed") == 1.0

    def test_exposition(self, tmp_path):
        collector = get_metrics_collector()
        collector.record_check("duality_identity", True)
        collector.record_rung()
        collector.set_last_lambda(-0.75)
        collector.record_iterations("mfg", 12)
        text = collector.get_metrics().decode()
        assert 'mfglab_acceptance_checks_total{check="duality_identity",outcome="pass"} 1.0' in text
        assert "mfglab_sweep_rungs_total 1.0" in text
        path = tmp_path / "metrics.prom"
        collector.write_textfile(path)
        assert "mfglab_last_lambda -0.75" in path.read_text(encoding="utf-8")

    def test_summary(self):
        collector = get_metrics_collector()
        collector.record_solve("fp", "converged")
        collector.record_solve("fp", "converged")
        summary = collector.get_summary()
        assert summary["solves"]["fp:converged"] == 2.0
        assert summary["last_lambda"] == 0.0
