"""Panodeform Settings.

Set any and all process-level variables here.

Si hay dos versiones del proyecto corriendo, deberían diferir sólo en las
variables definidas en este archivo. La configuración de experimentos
(modelo, datos, entrenamiento) vive en :mod:`panodeform.schemas`.

Optionally, secret or machine-specific stuff is located in a .env file,
automatically loaded by :mod:`pydantic` here.

"""
import os
from pathlib import Path

from pydantic import BaseSettings
from pydantic import conint

from panodeform.log import LogFormatter
from panodeform.log import LogLevel


class Settings(BaseSettings):
    """Valores comunes definidos aquí.

    Por defecto BaseSettings considera valores de campos en la siguiente
    prioridad (donde 3. tiene la mayor prioridad y sobreescribe las
    dos):

    1. Valores por defecto en la Config Class (pydantic).
    2. Variables de entorno (prefijo ``PANO_DEFORM_``).
    3. Argumentos pasados en instanciación de clase.

    .. Ver::

        https://pydantic-docs.helpmanual.io/usage/settings/

    """

    DATA_DIR: Path = Path("data")
    """Directorio por defecto para datasets sintéticos."""

    RUNS_DIR: Path = Path("runs")
    """Directorio por defecto para checkpoints, logs y reportes."""

    THREADS: conint(ge=1) = 1  # type: ignore
    """Máximo de workers (``PANO_DEFORM_THREADS``)."""

    SEED: int = 0

    PROGRESS: bool = False
    """Barras de progreso de tqdm en los loops de entrenamiento."""

    LOG_FORMAT: LogFormatter = LogFormatter.PLAIN
    LOG_LEVEL: LogLevel = LogLevel.INFO

    class Config:  # pylint: disable=too-few-public-methods
        """Lectura de entorno."""

        env_prefix = "PANO_DEFORM_"
        env_file = ".env"


class Production(Settings):
    """Valores específicos de producción."""

    LOG_FORMAT = LogFormatter.JSON
    LOG_LEVEL = LogLevel.INFO


class Development(Settings):
    """Valores específicos de desarrollo."""

    LOG_FORMAT = LogFormatter.COLOR
    LOG_LEVEL = LogLevel.DEBUG
    PROGRESS = True


class Testing(Settings):
    """Valores para la suite de pruebas."""

    LOG_FORMAT = LogFormatter.PLAIN
    LOG_LEVEL = LogLevel.WARNING


ENVIRONMENTS = {
    "production": Production,
    "development": Development,
    "testing": Testing,
}


def get_settings(env: str = None) -> Settings:
    """Instancia la clase de settings que corresponde a ``ENV``."""
    env = (env or os.environ.get("ENV", "development")).lower()
    return ENVIRONMENTS.get(env, Development)()
