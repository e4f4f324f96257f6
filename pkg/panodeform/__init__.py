"""Inicialización para panodeform."""

from importlib import metadata

from panodeform.log import configure_logger
from panodeform.settings import get_settings

S = get_settings()
DATA_DIR = S.DATA_DIR


def _meta() -> dict:
    try:
        found = metadata.metadata(__name__)
    except metadata.PackageNotFoundError:
        return {}
    return {key.lower(): value for key, value in found.items()}


__meta__ = _meta()


logger = configure_logger(  # pylint: disable=invalid-name
    __name__, S.LOG_FORMAT, S.LOG_LEVEL
)

logger.debug("initialized panodeform", **S.dict())
