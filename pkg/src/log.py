import logging
import os
import sys
from typing import Optional

import structlog
from dotenv import load_dotenv


load_dotenv()


def _stderr_logger(*args) -> structlog.PrintLogger:
    # looked up per logger so a redirected sys.stderr is honoured
    return structlog.PrintLogger(sys.stderr)


def configure_logging(level: Optional[str] = None) -> None:
    """
    Route structlog output to stderr. Level comes from the caller, else CBB_LOG_LEVEL, else WARNING.
    stdout is left alone for machine-readable output.
    """
    name = (level or os.getenv("CBB_LOG_LEVEL") or "WARNING").upper()
    numeric = logging.getLevelName(name)
    if not isinstance(numeric, int):
        numeric = logging.WARNING

    structlog.configure(
        processors=[
            structlog.processors.add_log_level,
            structlog.processors.StackInfoRenderer(),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(numeric),
        logger_factory=_stderr_logger,
        cache_logger_on_first_use=False,
    )
