# -*- coding: utf-8 -*-
"""Patch embedding deformable y MLP deformable.

Un patch de tamaño ``s`` se muestrea en ``s^2`` posiciones fijas
alrededor de su centro (:func:`fixed_offsets`). La versión deformable
desplaza cada posición con un offset aprendido y acotado a
``[-H/r, H/r] x [-W/r, W/r]``, leyendo el mapa con interpolación
bilineal. Con offsets nulos ambas versiones coinciden bit a bit, y lo
mismo ocurre entre :func:`dmlp_mix` y :func:`vanilla_mlp_mix`.

Grilla de patches: el patch de la salida ``o`` comienza en
``o * stride - (s - stride) // 2`` y su centro está ``s // 2`` más
adelante. Con ``s == stride`` los patches no se solapan.

"""
from dataclasses import dataclass
from typing import Dict
from typing import Optional
from typing import Tuple

import numpy as np

from panodeform.exceptions import DimensionError
from panodeform.exceptions import DivisibilityError
from panodeform.layers import Linear
from panodeform.layers import Module
from panodeform.layers import Parameter
from panodeform.numcore import Tensor
from panodeform.numcore import add
from panodeform.numcore import bilinear_sample
from panodeform.numcore import clamp
from panodeform.numcore import index_select
from panodeform.numcore import matmul
from panodeform.numcore import resolve_border
from panodeform.numcore import take_pixels
from panodeform.schemas import BorderMode
from panodeform.schemas import PatchEmbedConfig

PREDICTOR_KERNEL = 3


@dataclass
class OffsetField:
    """Desplazamientos ``H' x W' x G x 2`` con orden ``(dy, dx)``.

    ``bounds`` son los radios ``(H/r, W/r)`` del mapa de entrada; ``None``
    cuando ``r`` es ``None`` (offsets sin restricción).

    """

    offsets: Tensor
    bounds: Optional[Tuple[float, float]]
    r: Optional[float]

    @property
    def groups(self) -> int:
        return self.offsets.shape[2]

    def within_bounds(self) -> bool:
        if self.bounds is None:
            return True
        values = self.offsets.data
        return bool(
            (np.abs(values[..., 0]) <= self.bounds[0]).all()
            and (np.abs(values[..., 1]) <= self.bounds[1]).all()
        )


def _border(border) -> str:
    return BorderMode(border).value


def fixed_offsets(patch_size: int) -> np.ndarray:
    """Offsets ``s^2 x 2`` de un patch estándar relativos a su centro."""
    if patch_size < 1:
        raise DimensionError(op="fixed_offsets", detail="s < 1")
    steps = np.arange(patch_size) - patch_size // 2
    dy, dx = np.meshgrid(steps, steps, indexing="ij")
    return np.stack([dy.reshape(-1), dx.reshape(-1)], axis=-1).astype(float)


def output_size(extent: int, stride: int) -> int:
    return extent // stride


def check_divisible(height: int, width: int, stride: int) -> None:
    if height % stride or width % stride:
        raise DivisibilityError(height=height, width=width, stride=stride)


def patch_centres(n_out: int, patch_size: int, stride: int) -> np.ndarray:
    """Centro (en pixeles del mapa de entrada) de cada patch de salida."""
    pad = (patch_size - stride) // 2
    return np.arange(n_out) * stride - pad + patch_size // 2


def sampling_grid(
    height: int, width: int, patch_size: int, stride: int
) -> np.ndarray:
    """Coordenadas base ``H' x W' x s^2 x 2`` del patch embedding estándar."""
    cy = patch_centres(output_size(height, stride), patch_size, stride)
    cx = patch_centres(output_size(width, stride), patch_size, stride)
    centres = np.stack(np.meshgrid(cy, cx, indexing="ij"), axis=-1)
    grid = centres[:, :, None, :] + fixed_offsets(patch_size)[None, None]
    return grid.astype(float)


def standard_pe(
    f: Tensor, weight: Tensor, bias: Tensor, cfg: PatchEmbedConfig
) -> Tensor:
    """Patch embedding con offsets fijos.

    Args:
        f: Mapa ``H x W x C_in``.
        weight: Proyección ``(s^2 C_in) x C_out``.
        bias: ``C_out``.
        cfg: Tamaño de patch, stride y borde.

    Returns:
        ``(H/stride) x (W/stride) x C_out``.

    """
    height, width, channels = f.shape
    check_divisible(height, width, cfg.stride)
    grid = sampling_grid(height, width, cfg.patch_size, cfg.stride)
    ys, xs, _, _ = resolve_border(
        grid[..., 0], grid[..., 1], height, width, _border(cfg.border)
    )
    patches = take_pixels(f, ys.astype(np.intp), xs.astype(np.intp))
    out_h, out_w = grid.shape[:2]
    flat = patches.reshape(out_h * out_w, cfg.patch_size ** 2 * channels)
    return (matmul(flat, weight) + bias).reshape(out_h, out_w, weight.shape[1])


def predict_offsets(  # pylint: disable=too-many-arguments
    f: Tensor,
    weight: Tensor,
    bias: Tensor,
    groups: int,
    r: Optional[float],
    stride: int = 1,
    patch_size: int = 1,
    border: str = "clamp",
) -> OffsetField:
    """Convolución 3x3 centrada en cada patch que emite ``2 G`` offsets.

    Los valores crudos se acotan a ``[-H/r, H/r]`` (filas) y
    ``[-W/r, W/r]`` (columnas), con ``H x W`` la extensión de ``f``.

    """
    height, width, channels = f.shape
    if weight.shape != (PREDICTOR_KERNEL ** 2 * channels, 2 * groups):
        raise DimensionError(
            op="predict_offsets",
            detail="pesos {} para C={} G={}".format(
                weight.shape, channels, groups
            ),
        )
    if r is not None and r <= 0:
        raise DimensionError(op="predict_offsets", detail="r <= 0")
    check_divisible(height, width, stride)
    cy = patch_centres(output_size(height, stride), patch_size, stride)
    cx = patch_centres(output_size(width, stride), patch_size, stride)
    window = fixed_offsets(PREDICTOR_KERNEL)
    ys = cy[:, None, None] + window[None, None, :, 0]
    xs = cx[None, :, None] + window[None, None, :, 1]
    ys, xs = np.broadcast_arrays(ys, xs)
    ys, xs, _, _ = resolve_border(ys, xs, height, width, _border(border))
    taps = take_pixels(f, ys.astype(np.intp), xs.astype(np.intp))
    out_h, out_w = len(cy), len(cx)
    raw = matmul(taps.reshape(out_h * out_w, -1), weight) + bias
    raw = raw.reshape(out_h, out_w, groups, 2)
    if r is None:
        return OffsetField(offsets=raw, bounds=None, r=None)
    bounds = (height / r, width / r)
    limit = np.array(bounds)
    return OffsetField(
        offsets=clamp_grad_semantics(raw, -limit, limit), bounds=bounds, r=r
    )


def clamp_grad_semantics(x, lo, hi) -> Tensor:
    """Clamp duro; gradiente 1 dentro de ``[lo, hi]`` y 0 fuera."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    return clamp(x, lo, hi)


def dpe(  # pylint: disable=too-many-arguments
    f: Tensor,
    weight: Tensor,
    bias: Tensor,
    offset_weight: Optional[Tensor],
    offset_bias: Optional[Tensor],
    cfg: PatchEmbedConfig,
    field: Optional[OffsetField] = None,
) -> Tensor:
    """Patch embedding deformable.

    Cada una de las ``s^2`` posiciones de un patch se desplaza por su
    offset y se lee con :func:`bilinear_sample`. Si ``field`` viene dado
    se usa en lugar de predecirlo (p.ej. para forzar offsets nulos).

    """
    height, width, channels = f.shape
    check_divisible(height, width, cfg.stride)
    border = _border(cfg.border)
    if field is None:
        field = predict_offsets(
            f,
            offset_weight,
            offset_bias,
            groups=cfg.patch_size ** 2,
            r=cfg.r,
            stride=cfg.stride,
            patch_size=cfg.patch_size,
            border=border,
        )
    grid = sampling_grid(height, width, cfg.patch_size, cfg.stride)
    if field.offsets.shape != grid.shape:
        raise DimensionError(
            op="dpe",
            detail="offsets {} vs grilla {}".format(
                field.offsets.shape, grid.shape
            ),
        )
    coords = add(Tensor(grid), field.offsets).reshape(-1, 2)
    sampled = bilinear_sample(f, coords, border)
    out_h, out_w = grid.shape[:2]
    flat = sampled.reshape(out_h * out_w, cfg.patch_size ** 2 * channels)
    return (matmul(flat, weight) + bias).reshape(out_h, out_w, weight.shape[1])


def vanilla_mlp_mix(
    z: Tensor, w: Tensor, bias: Optional[Tensor] = None
) -> Tensor:
    """Proyección por token ``N x C_in -> N x C_out``."""
    if z.ndim != 2 or z.shape[1] != w.shape[0]:
        raise DimensionError(
            op="vanilla_mlp_mix", detail="{} @ {}".format(z.shape, w.shape)
        )
    out = matmul(z, w)
    return out + bias if bias is not None else out


def dmlp_groups(channels: int, cap: int = 64) -> int:
    return min(channels, cap)


def dmlp_mix(  # pylint: disable=too-many-arguments
    f: Tensor,
    offset_weight: Optional[Tensor],
    offset_bias: Optional[Tensor],
    w: Tensor,
    bias: Optional[Tensor],
    r: Optional[float],
    groups_cap: int = 64,
    border: str = "clamp",
    field: Optional[OffsetField] = None,
) -> Tensor:
    """MLP deformable: cada canal se lee en su propio offset y luego FC.

    Con ``G = min(C, groups_cap)`` grupos de offsets el canal ``c`` usa
    el grupo ``c % G``.

    """
    height, width, channels = f.shape
    groups = dmlp_groups(channels, groups_cap)
    border = _border(border)
    if field is None:
        field = predict_offsets(
            f, offset_weight, offset_bias, groups=groups, r=r, border=border
        )
    if field.offsets.shape[:2] != (height, width):
        raise DimensionError(
            op="dmlp_mix", detail="offsets {}".format(field.offsets.shape)
        )
    per_channel = index_select(
        field.offsets, np.arange(channels) % field.groups, axis=2
    )
    base = np.stack(
        np.meshgrid(np.arange(height), np.arange(width), indexing="ij"),
        axis=-1,
    ).astype(float)[:, :, None, :]
    coords = add(Tensor(base), per_channel)
    coords = coords.reshape(height * width, channels, 2)
    gathered = bilinear_sample(f, coords, border)
    out = vanilla_mlp_mix(gathered, w, bias)
    return out.reshape(height, width, w.shape[1])


class OffsetPredictor(Module):
    """Pesos de la convolución 3x3 de offsets; inicializados en cero."""

    def __init__(self, in_channels: int, groups: int):
        super().__init__()
        self.groups = groups
        self.weight = Parameter(
            np.zeros((PREDICTOR_KERNEL ** 2 * in_channels, 2 * groups))
        )
        self.bias = Parameter(np.zeros(2 * groups))


class PatchEmbed(Module):
    """PE estándar o deformable según ``deformable``, con los mismos pesos.

    El último campo de offsets queda en :attr:`last_offsets`.

    """

    def __init__(
        self, cfg: PatchEmbedConfig, rng: Optional[np.random.Generator] = None
    ):
        super().__init__()
        self.cfg = cfg
        self.deformable = cfg.deformable
        self.proj = Linear(
            cfg.patch_size ** 2 * cfg.in_channels, cfg.out_channels, rng
        )
        if cfg.deformable:
            self.offsets = OffsetPredictor(
                cfg.in_channels, cfg.patch_size ** 2
            )
        self.last_offsets: Optional[OffsetField] = None

    def forward(self, f: Tensor) -> Tensor:
        if not (self.deformable and "offsets" in self._modules):
            self.last_offsets = None
            return standard_pe(f, self.proj.weight, self.proj.bias, self.cfg)
        field = predict_offsets(
            f,
            self.offsets.weight,
            self.offsets.bias,
            groups=self.cfg.patch_size ** 2,
            r=self.cfg.r,
            stride=self.cfg.stride,
            patch_size=self.cfg.patch_size,
            border=_border(self.cfg.border),
        )
        self.last_offsets = field
        return dpe(
            f,
            self.proj.weight,
            self.proj.bias,
            None,
            None,
            self.cfg,
            field=field,
        )


class DeformableMLP(Module):
    """Mezcla de tokens DMLP; con ``deformable=False`` es el MLP vanilla."""

    def __init__(  # pylint: disable=too-many-arguments
        self,
        in_channels: int,
        out_channels: int,
        r: Optional[float] = 4.0,
        groups_cap: int = 64,
        border: str = "clamp",
        deformable: bool = True,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        self.r = r
        self.groups_cap = groups_cap
        self.border = _border(border)
        self.deformable = deformable
        self.proj = Linear(in_channels, out_channels, rng)
        if deformable:
            self.offsets = OffsetPredictor(
                in_channels, dmlp_groups(in_channels, groups_cap)
            )
        self.last_offsets: Optional[OffsetField] = None

    def forward(self, f: Tensor) -> Tensor:
        height, width, channels = f.shape
        if not (self.deformable and "offsets" in self._modules):
            self.last_offsets = None
            out = vanilla_mlp_mix(
                f.reshape(height * width, channels),
                self.proj.weight,
                self.proj.bias,
            )
            return out.reshape(height, width, self.proj.out_features)
        field = predict_offsets(
            f,
            self.offsets.weight,
            self.offsets.bias,
            groups=self.offsets.groups,
            r=self.r,
            border=self.border,
        )
        self.last_offsets = field
        return dmlp_mix(
            f,
            None,
            None,
            self.proj.weight,
            self.proj.bias,
            self.r,
            self.groups_cap,
            self.border,
            field=field,
        )


def offset_statistics(field: OffsetField) -> Dict[str, float]:
    """Media y máximo de ``|offset|`` y fracción saturada en la cota."""
    values = np.abs(field.offsets.data)
    if values.size == 0:
        return {"mean_abs": 0.0, "max_abs": 0.0, "saturated": 0.0}
    saturated = 0.0
    if field.bounds is not None:
        limit = np.array(field.bounds)
        saturated = float(np.mean(values >= limit - 1e-12))
    return {
        "mean_abs": float(values.mean()),
        "max_abs": float(values.max()),
        "saturated": saturated,
    }
