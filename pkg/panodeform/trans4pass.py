# -*- coding: utf-8 -*-
"""Red de segmentación: encoder piramidal con DPE y decoder DPE + DMLP.

Encoder: cuatro etapas, cada una con un patch embedding (deformable en la
primera etapa por defecto) seguido de bloques transformer con atención de
reducción espacial. Decoder: por etapa ``z_l -> DPE -> +DMLP -> +MLP ->
Up(H/4, W/4)``; las etapas se suman (features fusionadas, las que alinea
MPA) y pasan por LayerNorm y un clasificador lineal. El modelo completo
sube los logits a la resolución del input.

Todos los mapas son ``H x W x C`` sin dimensión de batch.

"""
from typing import Any
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np

from panodeform.deform import DeformableMLP
from panodeform.deform import PatchEmbed
from panodeform.deform import check_divisible
from panodeform.deform import dmlp_groups
from panodeform.exceptions import DivisibilityError
from panodeform.exceptions import StageMismatch
from panodeform.layers import LayerNorm
from panodeform.layers import Linear
from panodeform.layers import Mlp
from panodeform.layers import Module
from panodeform.layers import ModuleList
from panodeform.numcore import Tensor
from panodeform.numcore import as_tensor
from panodeform.numcore import bmm
from panodeform.numcore import no_grad
from panodeform.numcore import resize_array
from panodeform.numcore import softmax
from panodeform.numcore import upsample_bilinear
from panodeform.schemas import DecoderKind
from panodeform.schemas import ModelConfig
from panodeform.schemas import PatchEmbedConfig

FeaturePyramid = List[Tensor]

OUTPUT_STRIDE = 4


def effective_reduction(height: int, width: int, ratio: int) -> int:
    """Mayor divisor común de ``height`` y ``width`` hasta ``ratio``."""
    for candidate in range(min(ratio, height, width), 0, -1):
        if height % candidate == 0 and width % candidate == 0:
            return candidate
    return 1


def avg_pool(x: Tensor, ratio: int) -> Tensor:
    """Promedio en ventanas ``ratio x ratio`` sin solape."""
    if ratio == 1:
        return x
    height, width, channels = x.shape
    blocks = x.reshape(
        height // ratio, ratio, width // ratio, ratio, channels
    )
    return blocks.mean(axis=(1, 3))


def relative_strides(strides: Sequence[int]) -> List[int]:
    out = [strides[0]]
    for previous, current in zip(strides, strides[1:]):
        if current % previous:
            raise StageMismatch(
                detail="stride {} no es múltiplo de {}".format(
                    current, previous
                )
            )
        out.append(current // previous)
    return out


class SpatialReductionAttention(Module):
    """Self-attention multi-cabeza con keys/values promediados por ``sr``.

    Los mapas de atención del último forward quedan en
    :attr:`last_attention` (``heads x N x M``).

    """

    def __init__(
        self,
        channels: int,
        heads: int,
        sr_ratio: int,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        self.heads = heads
        self.head_dim = channels // heads
        self.sr_ratio = sr_ratio
        self.scale = self.head_dim ** -0.5
        self.q = Linear(channels, channels, rng)
        self.k = Linear(channels, channels, rng)
        self.v = Linear(channels, channels, rng)
        self.proj = Linear(channels, channels, rng)
        if sr_ratio > 1:
            self.norm = LayerNorm(channels)
        self.last_attention: Optional[np.ndarray] = None

    def forward(self, x: Tensor) -> Tensor:
        height, width, channels = x.shape
        tokens = height * width
        q = self.q(x).reshape(tokens, self.heads, self.head_dim)
        context = x
        if self.sr_ratio > 1:
            ratio = effective_reduction(height, width, self.sr_ratio)
            context = self.norm(avg_pool(x, ratio))
        keys = context.shape[0] * context.shape[1]
        k = self.k(context).reshape(keys, self.heads, self.head_dim)
        v = self.v(context).reshape(keys, self.heads, self.head_dim)
        scores = bmm(q.transpose(1, 0, 2), k.transpose(1, 2, 0))
        attention = softmax(scores * self.scale, axis=-1)
        self.last_attention = attention.data
        out = bmm(attention, v.transpose(1, 0, 2)).transpose(1, 0, 2)
        return self.proj(out.reshape(tokens, channels)).reshape(
            height, width, channels
        )


class TransformerBlock(Module):
    """``x + SRA(LN x)`` seguido de ``x + MLP(LN x)``."""

    def __init__(  # pylint: disable=too-many-arguments
        self,
        channels: int,
        heads: int,
        sr_ratio: int,
        mlp_ratio: int,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        self.norm1 = LayerNorm(channels)
        self.attn = SpatialReductionAttention(channels, heads, sr_ratio, rng)
        self.norm2 = LayerNorm(channels)
        self.mlp = Mlp(channels, channels * mlp_ratio, rng=rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class EncoderStage(Module):
    """Patch embedding (DPE o PE) + LayerNorm + bloques + LayerNorm."""

    def __init__(  # pylint: disable=too-many-arguments
        self,
        index: int,
        in_channels: int,
        stride: int,
        cfg: ModelConfig,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        channels = cfg.channels[index]
        self.stride = stride
        self.embed = PatchEmbed(
            PatchEmbedConfig(
                patch_size=cfg.patch_sizes[index],
                stride=stride,
                in_channels=in_channels,
                out_channels=channels,
                deformable=cfg.encoder_deformable[index],
                r=cfg.r,
                border=cfg.border,
            ),
            rng,
        )
        self.embed_norm = LayerNorm(channels)
        self.blocks = ModuleList(
            TransformerBlock(
                channels,
                cfg.heads[index],
                cfg.sr_ratios[index],
                cfg.mlp_ratio,
                rng,
            )
            for _ in range(cfg.depths[index])
        )
        self.norm = LayerNorm(channels)

    def forward(self, x: Tensor) -> Tensor:
        x = self.embed_norm(self.embed(x))
        for block in self.blocks:
            x = block(x)
        return self.norm(x)


def encoder_stage(x: Tensor, stage: EncoderStage) -> Tensor:
    """Aplica una etapa; el input debe ser divisible por su stride."""
    check_divisible(x.shape[0], x.shape[1], stage.stride)
    return stage(x)


class DecoderStage(Module):
    """``DPE(C_l -> C_emb)``, ``+DMLP``, ``+MLP`` y upsample a ``H/4``."""

    def __init__(
        self,
        in_channels: int,
        cfg: ModelConfig,
        rng: Optional[np.random.Generator] = None,
    ):
        super().__init__()
        embed_dim = cfg.embed_dim
        self.embed = PatchEmbed(
            PatchEmbedConfig(
                patch_size=cfg.decoder_patch_size,
                stride=1,
                in_channels=in_channels,
                out_channels=embed_dim,
                deformable=cfg.decoder_deformable,
                r=cfg.r,
                border=cfg.border,
            ),
            rng,
        )
        self.mix = DeformableMLP(
            embed_dim,
            embed_dim,
            r=cfg.r,
            groups_cap=cfg.dmlp_groups_cap,
            border=cfg.border.value,
            deformable=cfg.decoder == DecoderKind.dmlp,
            rng=rng,
        )
        self.mlp = Mlp(embed_dim, embed_dim * cfg.mlp_ratio, rng=rng)

    def forward(self, z: Tensor, out_h: int, out_w: int) -> Tensor:
        z = self.embed(z)
        z = self.mix(z) + z
        z = self.mlp(z) + z
        if z.shape[:2] == (out_h, out_w):
            return z
        return upsample_bilinear(z, out_h, out_w)


class Decoder(Module):
    def __init__(
        self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None
    ):
        super().__init__()
        self.cfg = cfg
        self.stages = ModuleList(
            DecoderStage(channels, cfg, rng) for channels in cfg.channels
        )
        self.norm = LayerNorm(cfg.embed_dim)
        self.classifier = Linear(cfg.embed_dim, cfg.classes, rng)

    def stage_embeddings(self, pyr: FeaturePyramid) -> List[Tensor]:
        """``z_l`` ya llevados a la grilla de la primera etapa."""
        if len(pyr) != len(self.stages):
            raise StageMismatch(
                detail="{} mapas para {} etapas".format(
                    len(pyr), len(self.stages)
                )
            )
        for level, (feature, channels) in enumerate(
            zip(pyr, self.cfg.channels)
        ):
            if feature.ndim != 3 or feature.shape[2] != channels:
                raise StageMismatch(
                    detail="etapa {} con forma {}".format(level, feature.shape)
                )
        out_h, out_w = pyr[0].shape[:2]
        return [
            stage(feature, out_h, out_w)
            for stage, feature in zip(self.stages, pyr)
        ]

    def classify(self, fused: Tensor) -> Tensor:
        return self.classifier(self.norm(fused))

    def forward(self, pyr: FeaturePyramid) -> Tuple[Tensor, Tensor]:
        fused = fuse_features(self.stage_embeddings(pyr))
        return self.classify(fused), fused


def fuse_features(stages: Sequence[Tensor]) -> Tensor:
    """Suma elemento a elemento de los embeddings de etapa."""
    if not stages:
        raise StageMismatch(detail="sin etapas")
    shape = stages[0].shape
    fused = stages[0]
    for stage in stages[1:]:
        if stage.shape != shape:
            raise StageMismatch(
                detail="{} vs {}".format(stage.shape, shape)
            )
        fused = fused + stage
    return fused


class Trans4PASS(Module):
    """Modelo completo ``H x W x 3 -> H x W x K``.

    Example:

        >>> model = Trans4PASS(ModelConfig(), stream(0, "init"))
        >>> model(np.zeros((64, 128, 3))).shape
        (64, 128, 5)

    """

    def __init__(
        self, cfg: ModelConfig, rng: Optional[np.random.Generator] = None
    ):
        super().__init__()
        self.cfg = cfg
        strides = relative_strides(cfg.strides)
        in_channels = [3] + list(cfg.channels[:-1])
        self.encoder = ModuleList(
            EncoderStage(index, in_channels[index], strides[index], cfg, rng)
            for index in range(len(cfg.channels))
        )
        self.decoder = Decoder(cfg, rng)
        self.last_fused: Optional[Tensor] = None

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 3 or x.shape[2] != 3:
            raise StageMismatch(detail="input {}".format(x.shape))
        height, width = x.shape[:2]
        if height % self.cfg.strides[-1] or width % self.cfg.strides[-1]:
            raise DivisibilityError(
                height=height, width=width, stride=self.cfg.strides[-1]
            )

    def encode(self, x) -> FeaturePyramid:
        x = as_tensor(x)
        self.check_input(x)
        pyr = []
        for stage in self.encoder:
            x = encoder_stage(x, stage)
            pyr.append(x)
        return pyr

    def decode(self, pyr: FeaturePyramid) -> Tensor:
        logits, fused = self.decoder(pyr)
        self.last_fused = fused
        return logits

    def forward_features(self, x) -> Tuple[Tensor, Tensor]:
        """Logits a resolución completa y features fusionadas ``H/4``."""
        x = as_tensor(x)
        logits = self.decode(self.encode(x))
        height, width = x.shape[:2]
        return upsample_bilinear(logits, height, width), self.last_fused

    def forward(self, x) -> Tensor:
        return self.forward_features(x)[0]

    def predict(self, image: np.ndarray) -> np.ndarray:
        """Mapa de clases (argmax) sin registrar grafo."""
        with no_grad():
            logits = self.forward(Tensor(image))
        return np.argmax(logits.data, axis=-1)

    def offset_fields(self) -> Dict[str, Any]:
        """Últimos campos de offsets por módulo deformable."""
        return {
            name: module.last_offsets
            for name, module in self.named_modules()
            if getattr(module, "last_offsets", None) is not None
        }


def encode(x, model: Trans4PASS) -> FeaturePyramid:
    return model.encode(x)


def decode(pyr: FeaturePyramid, model: Trans4PASS) -> Tensor:
    return model.decode(pyr)


def forward(x, model: Trans4PASS) -> Tensor:
    return model(x)


def embed_multiscale(
    model: Trans4PASS, image: np.ndarray, scales: Sequence[float] = (1.0,)
) -> np.ndarray:
    """Features fusionadas promediadas sobre varias escalas de input.

    Cada escala se remuestrea a la grilla ``H/4 x W/4`` de la escala 1.

    """
    height, width = image.shape[:2]
    base_h, base_w = height // OUTPUT_STRIDE, width // OUTPUT_STRIDE
    total = np.zeros((base_h, base_w, model.cfg.embed_dim))
    with no_grad():
        for scale in scales:
            out_h = int(round(height * scale))
            out_w = int(round(width * scale))
            if out_h % model.cfg.strides[-1] or out_w % model.cfg.strides[-1]:
                raise DivisibilityError(
                    height=out_h, width=out_w, stride=model.cfg.strides[-1]
                )
            scaled = image
            if (out_h, out_w) != (height, width):
                scaled = np.clip(resize_array(image, out_h, out_w), 0, 1)
            _, fused = model.forward_features(Tensor(scaled))
            features = fused.data
            if features.shape[:2] != (base_h, base_w):
                features = resize_array(features, base_h, base_w)
            total += features
    return total / len(scales)


# Conteo de parámetros --------------------------------------------------------


def _linear(i: int, o: int) -> int:
    return i * o + o


def _norm(c: int) -> int:
    return 2 * c


def _mlp(c: int, hidden: int) -> int:
    return _linear(c, hidden) + _linear(hidden, c)


def _predictor(c: int, groups: int) -> int:
    return 9 * c * 2 * groups + 2 * groups


def analytic_parameter_count(cfg: ModelConfig) -> Dict[str, int]:
    """Cuenta de parámetros por fórmula cerrada, sin construir el modelo."""
    counts: Dict[str, int] = {}
    in_channels = [3] + list(cfg.channels[:-1])
    for index, channels in enumerate(cfg.channels):
        size = cfg.patch_sizes[index]
        total = _linear(size * size * in_channels[index], channels)
        if cfg.encoder_deformable[index]:
            total += _predictor(in_channels[index], size * size)
        total += 2 * _norm(channels)
        block = 2 * _norm(channels)
        block += 4 * _linear(channels, channels)
        if cfg.sr_ratios[index] > 1:
            block += _norm(channels)
        block += _mlp(channels, channels * cfg.mlp_ratio)
        counts["encoder.{}".format(index)] = total + block * cfg.depths[index]
    embed = cfg.embed_dim
    groups = dmlp_groups(embed, cfg.dmlp_groups_cap)
    for index, channels in enumerate(cfg.channels):
        size = cfg.decoder_patch_size
        total = _linear(size * size * channels, embed)
        if cfg.decoder_deformable:
            total += _predictor(channels, size * size)
        total += _linear(embed, embed)
        if cfg.decoder == DecoderKind.dmlp:
            total += _predictor(embed, groups)
        total += _mlp(embed, embed * cfg.mlp_ratio)
        counts["decoder.stages.{}".format(index)] = total
    counts["decoder.head"] = _norm(embed) + _linear(embed, cfg.classes)
    counts["total"] = sum(counts.values())
    return counts


def describe(cfg: ModelConfig, height: int, width: int) -> Dict[str, Any]:
    """Formas por etapa y cuentas de parámetros (construidas y analíticas)."""
    if height % cfg.strides[-1] or width % cfg.strides[-1]:
        raise DivisibilityError(
            height=height, width=width, stride=cfg.strides[-1]
        )
    model = Trans4PASS(cfg)
    params = {
        name: sum(p.size for p in module.parameters())
        for name, module in [
            ("encoder.{}".format(i), stage)
            for i, stage in enumerate(model.encoder)
        ]
        + [
            ("decoder.stages.{}".format(i), stage)
            for i, stage in enumerate(model.decoder.stages)
        ]
    }
    params["decoder.head"] = (
        model.decoder.norm.num_parameters()
        + model.decoder.classifier.num_parameters()
    )
    params["total"] = model.num_parameters()
    stages = []
    for index, (stride, channels) in enumerate(zip(cfg.strides, cfg.channels)):
        stages.append(
            {
                "stage": index + 1,
                "stride": stride,
                "encoder_shape": [height // stride, width // stride, channels],
                "decoder_shape": [
                    height // OUTPUT_STRIDE,
                    width // OUTPUT_STRIDE,
                    cfg.embed_dim,
                ],
                "deformable": cfg.encoder_deformable[index],
                "params": params["encoder.{}".format(index)],
            }
        )
    return {
        "input": [height, width, 3],
        "stages": stages,
        "fused": [
            height // OUTPUT_STRIDE,
            width // OUTPUT_STRIDE,
            cfg.embed_dim,
        ],
        "logits": [height, width, cfg.classes],
        "decoder": cfg.decoder.value,
        "params": params,
        "analytic_params": analytic_parameter_count(cfg),
    }
