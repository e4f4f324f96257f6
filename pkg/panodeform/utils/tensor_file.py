# -*- coding: utf-8 -*-
"""Formato binario PDT1 para tensores y su índice JSON de parámetros.

Layout (little-endian)::

    b"PDT1" | u8 rank | rank x u32 extents | f64 payload row-major

"""
import json
import struct
from pathlib import Path
from typing import Dict
from typing import Union

import numpy as np

from panodeform.exceptions import CorruptTensorFile
from panodeform.exceptions import DatasetIOError
from panodeform.numcore import Tensor

MAGIC = b"PDT1"

PathLike = Union[str, Path]


def encode(array: np.ndarray) -> bytes:
    """Serializa un arreglo a bytes PDT1."""
    array = np.asarray(array, dtype="<f8")
    if array.ndim > 255:
        raise CorruptTensorFile(path="<memoria>", detail="rank > 255")
    header = MAGIC + struct.pack("<B", array.ndim)
    header += struct.pack("<{}I".format(array.ndim), *array.shape)
    return header + np.ascontiguousarray(array).tobytes()


def decode(payload: bytes, path: PathLike = "<memoria>") -> np.ndarray:
    """Lee bytes PDT1; valida magic, extents y largo del payload."""
    if payload[:4] != MAGIC:
        raise CorruptTensorFile(path=path, detail="magic desconocido")
    if len(payload) < 5:
        raise CorruptTensorFile(path=path, detail="header truncado")
    rank = payload[4]
    start = 5 + 4 * rank
    if len(payload) < start:
        raise CorruptTensorFile(path=path, detail="extents truncados")
    shape = struct.unpack("<{}I".format(rank), payload[5:start])
    expected = int(np.prod(shape, dtype=np.int64)) * 8
    if len(payload) - start != expected:
        raise CorruptTensorFile(
            path=path,
            detail="payload de {} bytes, se esperaban {}".format(
                len(payload) - start, expected
            ),
        )
    return np.frombuffer(payload[start:], dtype="<f8").reshape(shape).copy()


def save_array(path: PathLike, array: np.ndarray) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode(array))
    except OSError as error:
        raise DatasetIOError(path=path, detail=error)
    return path


def load_array(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        payload = path.read_bytes()
    except OSError as error:
        raise DatasetIOError(path=path, detail=error)
    return decode(payload, path)


def save_tensor(path: PathLike, tensor: Tensor) -> Path:
    return save_array(path, tensor.data)


def load_tensor(path: PathLike, requires_grad: bool = False) -> Tensor:
    return Tensor(load_array(path), requires_grad=requires_grad)


def save_parameters(
    directory: PathLike, parameters: Dict[str, np.ndarray]
) -> Path:
    """Guarda ``params.json`` + un blob PDT1 por parámetro nombrado.

    El índice conserva el orden de ``parameters``.

    """
    directory = Path(directory)
    index = {}
    for name, value in parameters.items():
        relative = Path("params") / (name + ".pdt")
        save_array(directory / relative, value)
        index[name] = {
            "file": relative.as_posix(),
            "shape": list(np.shape(value)),
        }
    index_path = directory / "params.json"
    index_path.write_text(json.dumps(index, indent=2))
    return index_path


def load_parameters(directory: PathLike) -> Dict[str, np.ndarray]:
    directory = Path(directory)
    index_path = directory / "params.json"
    try:
        index = json.loads(index_path.read_text())
    except (OSError, ValueError) as error:
        raise DatasetIOError(path=index_path, detail=error)
    parameters = {}
    for name, entry in index.items():
        value = load_array(directory / entry["file"])
        if list(value.shape) != entry["shape"]:
            raise CorruptTensorFile(
                path=entry["file"], detail="forma distinta al índice"
            )
        parameters[name] = value
    return parameters
