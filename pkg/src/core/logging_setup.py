import logging
import sys
import uuid
from typing import Any, Dict, Optional

import numpy as np
import structlog
from structlog.types import FilteringBoundLogger

from src.core.config import get_config


def add_run_id(_, __, event_dict: Dict[str, Any]) -> Dict[str, Any]:
    if "run_id" not in event_dict:
        event_dict["run_id"] = "unbound"
    
    return event_dict


def numpy_to_builtin(_, __, event_dict: Dict[str, Any]) -> Dict[str, Any]:
    """Plain Python values for numpy scalars and small arrays so JSON rendering never fails."""
    for key, value in event_dict.items():
        if isinstance(value, np.generic):
            event_dict[key] = value.item()
        elif isinstance(value, np.ndarray):
            event_dict[key] = value.tolist() if value.size <= 16 else f"ndarray(shape={value.shape})"
    
    return event_dict


def setup_logging(environment: Optional[str] = None, log_level: Optional[str] = None) -> None:
    
    config = get_config()
    env = environment or config.ENVIRONMENT
    numeric_level = getattr(logging, (log_level or config.LOG_LEVEL).upper(), logging.INFO)
    
    logging.basicConfig(
        format="%(message)s",
        level=numeric_level,
        stream=sys.stderr
    )
    
    shared_processors = [
        structlog.contextvars.merge_contextvars,
        structlog.stdlib.add_log_level,
        structlog.stdlib.add_logger_name,
        structlog.processors.TimeStamper(fmt="iso"),
        add_run_id,
        numpy_to_builtin,
        structlog.processors.StackInfoRenderer(),
        structlog.processors.format_exc_info,
    ]
    
    if env.lower() in ("prod", "production", "ci"):
        processors = shared_processors + [
            structlog.processors.JSONRenderer()
        ]
    else:
        processors = shared_processors + [
            structlog.dev.ConsoleRenderer(
                colors=False,
                exception_formatter=structlog.dev.plain_traceback
            )
        ]
    
    structlog.configure(
        processors=processors,
        wrapper_class=structlog.make_filtering_bound_logger(numeric_level),
        context_class=dict,
        logger_factory=structlog.stdlib.LoggerFactory(),
        cache_logger_on_first_use=False,
    )


def get_logger(name: str) -> FilteringBoundLogger:
    return structlog.get_logger(name)

def new_run_id() -> str:
    return uuid.uuid4().hex[:12]

def set_run_id(run_id: str) -> None:
    structlog.contextvars.bind_contextvars(run_id=run_id)

def clear_run_id() -> None:
    structlog.contextvars.clear_contextvars()

def get_run_id() -> Optional[str]:
    context = structlog.contextvars.get_contextvars()
    return context.get("run_id")
