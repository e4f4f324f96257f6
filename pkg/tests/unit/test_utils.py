# -*- coding: utf-8 -*-
"""Formato PDT1, overrides y streams aleatorios."""
import struct

import numpy as np
import pytest

from panodeform.exceptions import CorruptTensorFile
from panodeform.exceptions import DatasetIOError
from panodeform.exceptions import InvalidOverride
from panodeform.utils.overrides import apply_overrides
from panodeform.utils.overrides import parse_value
from panodeform.utils.rng import RngStreams
from panodeform.utils.rng import stream
from panodeform.utils.tensor_file import MAGIC
from panodeform.utils.tensor_file import decode
from panodeform.utils.tensor_file import encode
from panodeform.utils.tensor_file import load_array
from panodeform.utils.tensor_file import load_parameters
from panodeform.utils.tensor_file import load_tensor
from panodeform.utils.tensor_file import save_array
from panodeform.utils.tensor_file import save_parameters


def test_header_layout():
    payload = encode(np.arange(6, dtype=float).reshape(2, 3))
    assert payload[:4] == MAGIC
    assert payload[4] == 2
    assert struct.unpack("<2I", payload[5:13]) == (2, 3)
    assert len(payload) == 13 + 6 * 8
    assert struct.unpack("<d", payload[13 + 8 : 13 + 16])[0] == 1.0


def test_scalar_and_empty_arrays():
    np.testing.assert_array_equal(decode(encode(np.float64(2.5))), 2.5)
    assert decode(encode(np.zeros((0, 4)))).shape == (0, 4)


@pytest.mark.parametrize(
    "payload",
    [
        b"PDT2\x01\x01\x00\x00\x00" + bytes(8),
        b"PDT1\x02\x01\x00\x00",
        b"PDT1\x01\x02\x00\x00\x00" + bytes(8),
        b"PDT",
    ],
)
def test_corrupt_payloads(payload):
    with pytest.raises(CorruptTensorFile):
        decode(payload)


def test_files(tmp_path, rng):
    values = rng.standard_normal((3, 2, 2))
    path = save_array(tmp_path / "nested" / "x.pdt", values)
    np.testing.assert_array_equal(load_array(path), values)
    tensor = load_tensor(path, requires_grad=True)
    assert tensor.requires_grad and tensor.shape == (3, 2, 2)
    with pytest.raises(DatasetIOError):
        load_array(tmp_path / "missing.pdt")


def test_parameter_index(tmp_path, rng):
    params = {"b.weight": rng.standard_normal((2, 3)), "a": np.zeros(4)}
    save_parameters(tmp_path, params)
    loaded = load_parameters(tmp_path)
    assert list(loaded) == ["b.weight", "a"]
    np.testing.assert_array_equal(loaded["b.weight"], params["b.weight"])
    save_array(tmp_path / "params" / "a.pdt", np.zeros(5))
    with pytest.raises(CorruptTensorFile):
        load_parameters(tmp_path)


def test_parse_value():
    assert parse_value("1e-4") == 1e-4
    assert parse_value("null") is None
    assert parse_value("[1, 2]") == [1, 2]
    assert parse_value("clamp") == "clamp"


def test_apply_overrides_copies():
    config = {"trainer": {"lr0": 1.0}, "seed": 0}
    updated = apply_overrides(config, ["trainer.lr0=0.5", "seed=3"])
    assert updated == {"trainer": {"lr0": 0.5}, "seed": 3}
    assert config["trainer"]["lr0"] == 1.0


@pytest.mark.parametrize("override", ["seed", "=3", "seed.x.y=1"])
def test_invalid_overrides(override):
    with pytest.raises(InvalidOverride):
        apply_overrides({"seed": 0}, [override])


def test_named_streams_are_independent():
    a = stream(0, "data").standard_normal(4)
    np.testing.assert_array_equal(a, stream(0, "data").standard_normal(4))
    assert not np.array_equal(a, stream(0, "augment").standard_normal(4))
    assert not np.array_equal(a, stream(1, "data").standard_normal(4))


def test_stream_cache_keeps_state():
    streams = RngStreams(5)
    first = streams["data"].random(3)
    second = streams["data"].random(3)
    fresh = stream(5, "data").random(6)
    np.testing.assert_array_equal(np.concatenate([first, second]), fresh)
