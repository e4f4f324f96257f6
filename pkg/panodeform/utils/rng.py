"""Streams de números aleatorios con nombre.

Cada preocupación (orden de datos, aumentación, inicialización, mundos
sintéticos) tiene su propio generador derivado de ``(seed, nombre)``, de
modo que cambiar una no desplaza a las otras.

"""
import zlib
from typing import Dict

import numpy as np


def stream(seed: int, name: str) -> np.random.Generator:
    """Generador determinista para ``(seed, name)``."""
    return np.random.default_rng([int(seed), zlib.crc32(name.encode())])


class RngStreams:
    """Cache de streams por nombre para una semilla."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def __getitem__(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = stream(self.seed, name)
        return self._streams[name]
