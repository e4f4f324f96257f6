"""Overrides con path punteado: ``--set trainer.lr0=1e-4``."""
import copy
import json
from typing import Any
from typing import Dict
from typing import Iterable

from panodeform.exceptions import InvalidOverride


def parse_value(raw: str) -> Any:
    """Literal JSON si se puede, string en otro caso."""
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def apply_overrides(
    config: Dict[str, Any], overrides: Iterable[str]
) -> Dict[str, Any]:
    """Retorna una copia de ``config`` con cada ``a.b.c=valor`` aplicado.

    Las secciones intermedias deben existir; la validación de la llave
    final la hace el modelo de pydantic (``extra = "forbid"``).

    """
    config = copy.deepcopy(config)
    for override in overrides:
        path, sep, raw = override.partition("=")
        if not sep or not path:
            raise InvalidOverride(override=override, detail="falta `=`")
        keys = path.strip().split(".")
        node = config
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise InvalidOverride(
                    override=override,
                    detail="la sección `{}` no existe".format(key),
                )
            node = node[key]
        node[keys[-1]] = parse_value(raw.strip())
    return config
