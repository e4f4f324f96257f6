# -*- coding: utf-8 -*-
"""Pruebas unitarias para panodeform"""
import os

os.environ.setdefault("ENV", "testing")

import numpy as np  # noqa: E402  pylint: disable=wrong-import-position

from panodeform.numcore import Tensor  # noqa: E402


def leaf(values):
    """Tensor hoja con gradiente."""
    return Tensor(np.asarray(values, dtype=float), requires_grad=True)


def brute_confusion(pred, gt, classes, ignore=255):
    """Conteo de pares por fuerza bruta."""
    counts = np.zeros((classes, classes), dtype=np.int64)
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        if g != ignore:
            counts[g, p] += 1
    return counts
