"""Configuración del logger estructurado."""
import logging
import sys
from enum import Enum

import structlog


class LogFormatter(str, Enum):
    """Renderers disponibles."""

    JSON = "json"
    COLOR = "color"
    PLAIN = "plain"


class LogLevel(str, Enum):
    """Niveles aceptados en settings."""

    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"


def _renderer(formatter: LogFormatter):
    if formatter == LogFormatter.JSON:
        return structlog.processors.JSONRenderer(sort_keys=True)
    return structlog.dev.ConsoleRenderer(
        colors=formatter == LogFormatter.COLOR
    )


def configure_logger(
    name: str, formatter: LogFormatter, level: LogLevel
) -> structlog.stdlib.BoundLogger:
    """Configura structlog una vez y retorna el logger del paquete.

    Los eventos se emiten a ``stderr`` para no mezclarse con la salida
    de la CLI (reportes, tablas) que va a ``stdout``.

    """
    structlog.configure(
        processors=[
            structlog.contextvars.merge_contextvars,
            structlog.processors.add_log_level,
            structlog.processors.TimeStamper(fmt="iso"),
            structlog.processors.format_exc_info,
            _renderer(formatter),
        ],
        wrapper_class=structlog.make_filtering_bound_logger(
            logging.getLevelName(level.value)
        ),
        logger_factory=structlog.PrintLoggerFactory(file=sys.stderr),
        cache_logger_on_first_use=False,
    )
    return structlog.get_logger(name)
