# -*- coding: utf-8 -*-
"""Pruebas de patch embedding deformable y DMLP."""
import numpy as np
import pytest

from panodeform.deform import DeformableMLP
from panodeform.deform import OffsetField
from panodeform.deform import PatchEmbed
from panodeform.deform import dmlp_groups
from panodeform.deform import dmlp_mix
from panodeform.deform import dpe
from panodeform.deform import fixed_offsets
from panodeform.deform import offset_statistics
from panodeform.deform import patch_centres
from panodeform.deform import predict_offsets
from panodeform.deform import standard_pe
from panodeform.deform import vanilla_mlp_mix
from panodeform.exceptions import DimensionError
from panodeform.exceptions import DivisibilityError
from panodeform.numcore import Tensor
from panodeform.schemas import PatchEmbedConfig

from . import leaf


def zero_field(height, width, groups):
    return OffsetField(
        offsets=Tensor(np.zeros((height, width, groups, 2))),
        bounds=None,
        r=None,
    )


def test_fixed_offsets_grid():
    offsets = fixed_offsets(3)
    assert offsets.shape == (9, 2)
    np.testing.assert_array_equal(offsets[0], [-1, -1])
    np.testing.assert_array_equal(offsets[4], [0, 0])
    np.testing.assert_array_equal(offsets[5], [0, 1])
    np.testing.assert_array_equal(offsets[8], [1, 1])


def test_patch_centres():
    # patch 7, stride 4: centro del patch o en 4 o + 2
    np.testing.assert_array_equal(patch_centres(3, 7, 4), [2, 6, 10])
    np.testing.assert_array_equal(patch_centres(3, 3, 1), [0, 1, 2])


def test_dpe_with_zero_offsets_is_standard_pe(rng):
    for trial in range(50):
        patch = int(rng.choice([1, 2, 3, 7]))
        stride = int(rng.choice([1, 2, 4]))
        height, width = (stride * int(v) for v in rng.integers(1, 5, 2))
        c_in, c_out = (int(v) for v in rng.integers(1, 5, 2))
        cfg = PatchEmbedConfig(
            patch_size=patch,
            stride=stride,
            in_channels=c_in,
            out_channels=c_out,
            border="clamp" if trial % 2 else "wrap_horizontal",
        )
        f = Tensor(rng.standard_normal((height, width, c_in)))
        weight = Tensor(rng.standard_normal((patch ** 2 * c_in, c_out)))
        bias = Tensor(rng.standard_normal(c_out))
        field = zero_field(height // stride, width // stride, patch ** 2)
        deformable = dpe(f, weight, bias, None, None, cfg, field=field)
        standard = standard_pe(f, weight, bias, cfg)
        np.testing.assert_array_equal(deformable.data, standard.data)


def test_dmlp_with_zero_offsets_is_vanilla_mlp(rng):
    for _ in range(50):
        height, width = (int(v) for v in rng.integers(1, 6, 2))
        channels, out = (int(v) for v in rng.integers(1, 7, 2))
        f = Tensor(rng.standard_normal((height, width, channels)))
        w = Tensor(rng.standard_normal((channels, out)))
        bias = Tensor(rng.standard_normal(out))
        groups = dmlp_groups(channels, 4)
        mixed = dmlp_mix(
            f,
            None,
            None,
            w,
            bias,
            r=4.0,
            groups_cap=4,
            field=zero_field(height, width, groups),
        )
        vanilla = vanilla_mlp_mix(
            f.reshape(height * width, channels), w, bias
        )
        np.testing.assert_array_equal(
            mixed.data, vanilla.data.reshape(height, width, out)
        )


def test_offsets_respect_regional_restriction(rng):
    ratios = [1, 2, 4, 8]
    for trial in range(1000):
        r = ratios[trial % 4]
        height, width = (int(v) for v in rng.integers(1, 9, 2))
        channels, groups = (int(v) for v in rng.integers(1, 4, 2))
        f = Tensor(rng.standard_normal((height, width, channels)) * 5)
        weight = Tensor(rng.standard_normal((9 * channels, 2 * groups)) * 10)
        bias = Tensor(rng.standard_normal(2 * groups) * 10)
        field = predict_offsets(f, weight, bias, groups, r=r)
        assert field.bounds == (height / r, width / r)
        values = field.offsets.data
        assert (np.abs(values[..., 0]) <= height / r).all()
        assert (np.abs(values[..., 1]) <= width / r).all()
        assert field.within_bounds()


def test_unrestricted_offsets(rng):
    f = Tensor(rng.standard_normal((4, 4, 1)))
    weight = Tensor(np.zeros((9, 2)))
    bias = Tensor([100.0, -100.0])
    field = predict_offsets(f, weight, bias, 1, r=None)
    assert field.bounds is None
    np.testing.assert_array_equal(field.offsets.data[0, 0, 0], [100, -100])


def test_offset_order_is_dy_dx(rng):
    f = Tensor(rng.standard_normal((4, 8, 1)))
    bias = Tensor([1.0, 100.0])
    field = predict_offsets(f, Tensor(np.zeros((9, 2))), bias, 1, r=4)
    # filas acotadas por H/r = 1, columnas por W/r = 2
    np.testing.assert_array_equal(field.offsets.data[0, 0, 0], [1.0, 2.0])


def test_offset_statistics(rng):
    f = Tensor(rng.standard_normal((4, 4, 1)))
    field = predict_offsets(
        f, Tensor(np.zeros((9, 2))), Tensor([50.0, 0.25]), 1, r=2
    )
    stats = offset_statistics(field)
    assert stats["max_abs"] == 2.0
    assert stats["saturated"] == pytest.approx(0.5)
    assert stats["mean_abs"] == pytest.approx((2.0 + 0.25) / 2)


def test_predictor_weight_shape_is_checked(rng):
    f = Tensor(rng.standard_normal((4, 4, 2)))
    with pytest.raises(DimensionError):
        predict_offsets(f, Tensor(np.zeros((9, 2))), Tensor(np.zeros(2)), 1, 4)


def test_stride_must_divide():
    cfg = PatchEmbedConfig(patch_size=3, stride=2, in_channels=1)
    f = Tensor(np.zeros((5, 4, 1)))
    weight = Tensor(np.zeros((9, cfg.out_channels)))
    with pytest.raises(DivisibilityError):
        standard_pe(f, weight, Tensor(np.zeros(cfg.out_channels)), cfg)


def test_dmlp_channel_uses_group_modulo(rng):
    height, width, channels = 3, 5, 4
    values = rng.standard_normal((height, width, channels))
    offsets = np.zeros((height, width, 2, 2))
    offsets[..., 1, 1] = 1.0
    field = OffsetField(offsets=Tensor(offsets), bounds=None, r=None)
    out = dmlp_mix(
        Tensor(values),
        None,
        None,
        Tensor(np.eye(channels)),
        None,
        r=None,
        groups_cap=2,
        field=field,
    ).data
    np.testing.assert_array_equal(out[:, :-1, 0], values[:, :-1, 0])
    np.testing.assert_array_equal(out[:, :-1, 1], values[:, 1:, 1])
    np.testing.assert_array_equal(out[:, :-1, 2], values[:, :-1, 2])
    np.testing.assert_array_equal(out[:, :-1, 3], values[:, 1:, 3])


def test_dmlp_groups_cap():
    assert dmlp_groups(32) == 32
    assert dmlp_groups(128) == 64
    assert dmlp_groups(10, cap=4) == 4


def test_patch_embed_starts_as_standard(rng):
    cfg = PatchEmbedConfig(
        patch_size=3, stride=2, in_channels=2, out_channels=4
    )
    layer = PatchEmbed(cfg, rng)
    f = Tensor(rng.standard_normal((6, 8, 2)))
    deformable = layer(f).data
    assert layer.last_offsets is not None
    assert offset_statistics(layer.last_offsets)["max_abs"] == 0.0
    layer.deformable = False
    np.testing.assert_array_equal(layer(f).data, deformable)
    assert layer.last_offsets is None


def test_deformable_mlp_switch(rng):
    layer = DeformableMLP(4, 3, rng=rng)
    f = Tensor(rng.standard_normal((3, 3, 4)))
    deformable = layer(f).data
    layer.deformable = False
    np.testing.assert_array_equal(layer(f).data, deformable)


def test_offset_predictor_receives_gradient(rng):
    cfg = PatchEmbedConfig(
        patch_size=3, stride=1, in_channels=2, out_channels=3
    )
    layer = PatchEmbed(cfg, rng)
    layer.offsets.bias.data = rng.uniform(-0.4, 0.4, size=18)
    f = leaf(rng.standard_normal((4, 4, 2)))
    (layer(f) * Tensor(rng.standard_normal((4, 4, 3)))).sum().backward()
    assert np.abs(layer.offsets.weight.grad).max() > 0
    assert np.abs(layer.offsets.bias.grad).max() > 0
