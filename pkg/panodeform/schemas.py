# -*- coding: utf-8 -*-
"""Esquemas de configuración, escenas y reportes.

Toda la configuración de un experimento (hiperparámetros del modelo, de la
adaptación y del entrenamiento) vive en un solo :class:`RunConfig`
auditable; cada sección rechaza llaves desconocidas.

"""
from enum import Enum
from typing import Dict
from typing import List
from typing import Optional
from typing import Tuple

import numpy as np
from pydantic import BaseModel
from pydantic import Field
from pydantic import confloat
from pydantic import conint
from pydantic import root_validator
from pydantic import validator

from panodeform.numcore import IGNORE_INDEX
from panodeform.numcore import Tensor


class Domain(str, Enum):
    """Dominio de una escena."""

    pinhole = "pinhole"
    """Cámara de FoV estrecho: dominio fuente, con labels."""

    panorama = "panorama"
    """Proyección equirectangular 360: dominio objetivo."""


class BorderMode(str, Enum):
    """Manejo de coordenadas fuera del mapa en el muestreo bilineal."""

    clamp = "clamp"
    wrap_horizontal = "wrap_horizontal"
    """Filas saturadas, columnas envueltas (continuidad de 360 grados)."""


class DecoderKind(str, Enum):
    """Mezcla de tokens del decoder."""

    dmlp = "dmlp"
    mlp = "mlp"
    """Baseline: proyección lineal por token, sin contexto espacial."""


class AdaptMode(str, Enum):
    """Objetivos de adaptación de la escalera de ablación."""

    none = "none"
    """Sin adaptación (modelo entrenado sólo en la fuente)."""

    ssl = "ssl"
    mpa = "mpa"
    mpa_ssl = "mpa+ssl"

    @property
    def uses_bank(self) -> bool:
        return self in (AdaptMode.mpa, AdaptMode.mpa_ssl)

    @property
    def uses_pseudo_labels(self) -> bool:
        return self in (AdaptMode.ssl, AdaptMode.mpa_ssl)


class StrictModel(BaseModel):
    """Base que rechaza llaves desconocidas."""

    class Config:  # pylint: disable=too-few-public-methods
        extra = "forbid"
        validate_assignment = True


class SceneSpec(StrictModel):
    """Parámetros del generador sintético de escenas."""

    classes: conint(ge=2) = 5  # type: ignore
    layout_seed: int = 0
    min_objects: conint(ge=0) = 2  # type: ignore
    max_objects: conint(ge=0) = 6  # type: ignore
    fov_deg: confloat(gt=0, lt=180) = 70.0  # type: ignore
    pinhole_size: conint(ge=1) = 64  # type: ignore
    panorama_height: conint(ge=1) = 64  # type: ignore
    max_pitch_deg: confloat(ge=0, lt=90) = 10.0  # type: ignore
    noise: confloat(ge=0) = 0.03  # type: ignore

    @property
    def panorama_width(self) -> int:
        """Equirectangular: W == 2H."""
        return 2 * self.panorama_height

    @root_validator(skip_on_failure=True)
    def _object_range(cls, values):  # pylint: disable=no-self-argument
        if values["min_objects"] > values["max_objects"]:
            raise ValueError("min_objects > max_objects")
        return values


class PatchEmbedConfig(StrictModel):
    """Configuración de un patch embedding (estándar o deformable)."""

    patch_size: conint(ge=1) = 3  # type: ignore
    stride: conint(ge=1) = 1  # type: ignore
    in_channels: conint(ge=1) = 3  # type: ignore
    out_channels: conint(ge=1) = 16  # type: ignore
    deformable: bool = True
    r: Optional[confloat(gt=0)] = 4.0  # type: ignore
    """Divisor de la restricción regional; ``None`` deja offsets libres."""
    border: BorderMode = BorderMode.clamp


def _four(name):
    def check(cls, value):  # pylint: disable=unused-argument
        if len(value) != 4:
            raise ValueError("`{}` debe tener 4 etapas".format(name))
        return value

    return check


class ModelConfig(StrictModel):
    """Hiperparámetros de la red; por defecto la escala "nano"."""

    strides: List[int] = [4, 8, 16, 32]
    channels: List[conint(ge=1)] = [16, 32, 48, 64]  # type: ignore
    depths: List[conint(ge=0)] = [1, 1, 1, 1]  # type: ignore
    heads: List[conint(ge=1)] = [1, 2, 3, 4]  # type: ignore
    sr_ratios: List[conint(ge=1)] = [8, 4, 2, 1]  # type: ignore
    patch_sizes: List[conint(ge=1)] = [7, 3, 3, 3]  # type: ignore
    mlp_ratio: conint(ge=1) = 2  # type: ignore
    embed_dim: conint(gt=0) = 32  # type: ignore
    classes: conint(ge=2) = 5  # type: ignore
    r: Optional[confloat(gt=0)] = 4.0  # type: ignore
    decoder: DecoderKind = DecoderKind.dmlp
    decoder_patch_size: conint(ge=1) = 3  # type: ignore
    encoder_deformable: List[bool] = [True, False, False, False]
    decoder_deformable: bool = True
    dmlp_groups_cap: conint(ge=1) = 64  # type: ignore
    border: BorderMode = BorderMode.clamp

    _strides_four = validator("strides", allow_reuse=True)(_four("strides"))
    _channels_four = validator("channels", allow_reuse=True)(
        _four("channels")
    )
    _depths_four = validator("depths", allow_reuse=True)(_four("depths"))
    _heads_four = validator("heads", allow_reuse=True)(_four("heads"))
    _sr_four = validator("sr_ratios", allow_reuse=True)(_four("sr_ratios"))
    _patch_four = validator("patch_sizes", allow_reuse=True)(
        _four("patch_sizes")
    )
    _deform_four = validator("encoder_deformable", allow_reuse=True)(
        _four("encoder_deformable")
    )

    @validator("strides")
    def _increasing(cls, value):  # pylint: disable=no-self-argument
        if any(b <= a for a, b in zip(value, value[1:])) or value[0] < 1:
            raise ValueError("los strides deben ser estrictamente crecientes")
        return value

    @root_validator(skip_on_failure=True)
    def _heads_divide(cls, values):  # pylint: disable=no-self-argument
        for channels, heads in zip(values["channels"], values["heads"]):
            if channels % heads:
                raise ValueError(
                    "{} canales no se dividen en {} cabezas".format(
                        channels, heads
                    )
                )
        return values

    @classmethod
    def tiny(cls, classes: int = 5) -> "ModelConfig":
        """Configuración tiny de tamaño completo; sólo para formas."""
        return cls(
            channels=[64, 128, 320, 512],
            depths=[2, 2, 2, 2],
            heads=[1, 2, 5, 8],
            mlp_ratio=4,
            embed_dim=128,
            classes=classes,
        )


class AdaptConfig(StrictModel):
    """Hiperparámetros de MPA y pseudo-labels."""

    temperature: confloat(gt=0) = 20.0  # type: ignore
    lam: confloat(ge=0, le=1) = 0.9  # type: ignore
    alpha: confloat(ge=0) = 0.001  # type: ignore
    momentum: confloat(gt=0, lt=1) = 0.999  # type: ignore
    pseudo_threshold: Optional[float] = None
    scales: List[confloat(gt=0)] = [1.0]  # type: ignore
    """Escalas de input para los embeddings de prototipos."""


class AugmentConfig(StrictModel):
    """Aumentaciones de entrenamiento."""

    resize: bool = True
    ratio_range: Tuple[confloat(gt=0), confloat(gt=0)] = (  # type: ignore
        0.5,
        2.0,
    )
    flip: bool = True
    crop: bool = True


class TrainConfig(StrictModel):
    """Optimizador, schedule y loop."""

    lr0: confloat(gt=0) = 5e-5  # type: ignore
    power: confloat(gt=0) = 0.9  # type: ignore
    weight_decay: confloat(ge=0) = 1e-4  # type: ignore
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: confloat(gt=0) = 1e-8  # type: ignore
    batch_size: conint(ge=1) = 2  # type: ignore
    max_iters: conint(ge=1) = 300  # type: ignore
    adapt_iters: conint(ge=1) = 300  # type: ignore
    augment: AugmentConfig = AugmentConfig()


class DataConfig(StrictModel):
    """Tamaños de los splits sintéticos."""

    n_source: conint(ge=1) = 16  # type: ignore
    n_target: conint(ge=1) = 16  # type: ignore
    n_test: conint(ge=1) = 8  # type: ignore
    n_source_test: conint(ge=1) = 8  # type: ignore


class EvalConfig(StrictModel):
    """Evaluación y escalera de ablación."""

    n_sectors: conint(ge=1) = 8  # type: ignore
    modes: List[AdaptMode] = [
        AdaptMode.none,
        AdaptMode.ssl,
        AdaptMode.mpa,
        AdaptMode.mpa_ssl,
    ]


def _desk_trainer() -> TrainConfig:
    # lr del régimen completo escalado a pocas cientos de iteraciones
    return TrainConfig(lr0=1e-3)


class RunConfig(StrictModel):
    """Configuración completa de un run."""

    seed: int = 0
    scene: SceneSpec = SceneSpec()
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    adapt: AdaptConfig = AdaptConfig()
    trainer: TrainConfig = Field(default_factory=_desk_trainer)
    eval: EvalConfig = EvalConfig()

    @root_validator(skip_on_failure=True)
    def _consistent(cls, values):  # pylint: disable=no-self-argument
        if values["model"].classes != values["scene"].classes:
            raise ValueError("model.classes debe igualar scene.classes")
        if values["model"].embed_dim < values["model"].classes:
            raise ValueError("model.embed_dim debe ser >= classes")
        return values


class LabeledScene(BaseModel):
    """Imagen ``H x W x 3`` en [0, 1] con su mapa de labels.

    Las escenas objetivo (panoramas sin anotar) tienen ``labels=None``.

    """

    id: str
    domain: Domain
    image: np.ndarray
    labels: Optional[np.ndarray] = None
    yaw: Optional[float] = None
    pitch: Optional[float] = None

    class Config:  # pylint: disable=too-few-public-methods
        arbitrary_types_allowed = True

    @validator("image")
    def _image(cls, value):  # pylint: disable=no-self-argument
        value = np.asarray(value, dtype=np.float64)
        if value.ndim != 3 or value.shape[2] != 3:
            raise ValueError("la imagen debe ser HxWx3")
        if value.min() < 0 or value.max() > 1:
            raise ValueError("la imagen debe estar en [0, 1]")
        return value

    @validator("labels")
    def _labels(cls, value, values):  # pylint: disable=no-self-argument
        if value is None:
            return value
        value = np.asarray(value).astype(np.int64)
        image = values.get("image")
        if image is not None and value.shape != image.shape[:2]:
            raise ValueError("labels y la imagen difieren en extents")
        return value

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]

    def tensor(self) -> Tensor:
        return Tensor(self.image)

    def valid_pixels(self) -> int:
        if self.labels is None:
            return 0
        return int((self.labels != IGNORE_INDEX).sum())


class SceneEntry(StrictModel):
    """Entrada del manifest con paths relativos al directorio del dataset."""

    id: str
    domain: Domain
    image: str
    labels: Optional[str] = None
    height: int
    width: int
    yaw: Optional[float] = None
    pitch: Optional[float] = None


class DatasetManifest(StrictModel):
    """Índice JSON de un dataset sintético."""

    classes: int
    source: List[SceneEntry]
    target: List[SceneEntry]
    test: List[SceneEntry]
    source_test: List[SceneEntry] = []
    seed: int = 0


class SectorResult(StrictModel):
    """Resultado de un sector azimutal."""

    sector: int
    start_col: int
    end_col: int
    pixels: int
    miou: Optional[float]


class EvalReport(StrictModel):
    """Esquema de ``eval.json``."""

    mode: str = AdaptMode.none.value
    classes: int
    per_class: Dict[str, Optional[float]]
    miou: float
    pixel_accuracy: float
    sectors: List[Optional[float]]
    sector_details: List[SectorResult] = []
    source_miou: Optional[float] = None
    gap: Optional[float] = None
