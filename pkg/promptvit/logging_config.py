"""
Centralized logging configuration for the command-line runs.
Controls the promptvit console/file loggers and third-party library logs.
"""
import logging

import sentry_sdk

from promptvit.config import settings
from promptvit.logger import attach_file_handler, console_logger, file_logger, logger


def configure_logging(level: str | None = None, log_dir: str | None = None):
    """
    Configure promptvit and external library logging.
    Call this once at process startup.
    """
    resolved = logging.getLevelName((level or settings.log_level).upper())
    if not isinstance(resolved, int):
        resolved = logging.INFO
    if settings.debug:
        resolved = logging.DEBUG

    # 1. Our own loggers
    console_logger.setLevel(resolved)
    file_logger.setLevel(resolved)
    if settings.log_to_file:
        attach_file_handler(log_dir)

    # 2. numpy / scipy RuntimeWarnings end up in the log instead of raw stderr
    logging.captureWarnings(True)
    logging.getLogger("py.warnings").setLevel(logging.WARNING)

    # 3. Chatty libraries
    for name in ("matplotlib", "numexpr", "urllib3", "sentry_sdk"):
        logging.getLogger(name).setLevel(logging.WARNING)


def init_sentry() -> bool:
    """
    Initialize Sentry error tracking (only if DSN provided).
    Both entry points (main.py and python -m promptvit) call this before the CLI runs.
    """
    if settings.sentry_dsn and settings.sentry_dsn.startswith("https://"):
        sentry_sdk.init(
            dsn=settings.sentry_dsn,
            environment=settings.environment,
            traces_sample_rate=settings.sentry_traces_sample_rate,
            send_default_pii=False,
        )
        logger.info("sentry_initialized",
                    environment=settings.environment,
                    traces_sample_rate=settings.sentry_traces_sample_rate)
        return True
    logger.debug("sentry_disabled",
                 message="IVPT_SENTRY_DSN not configured - errors will only be logged locally")
    return False
