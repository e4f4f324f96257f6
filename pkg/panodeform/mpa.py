# -*- coding: utf-8 -*-
"""Adaptación prototípica mutua.

Un banco de prototipos (uno por clase, en el espacio de las features
fusionadas ``C_emb``) se inicializa con los embeddings de ambos dominios:
labels reales en la fuente, pseudo-labels en el objetivo. Durante la
adaptación el banco se actualiza con promedio móvil exponencial y sirve
de "profesor": el mapa prototípico ``f_hat`` (prototipo de la clase de
cada pixel) se destila en las features ``f`` con

    ``lam T^2 KL(softmax(f_hat/T) || softmax(f/T)) + (1 - lam) CE(y, f)``

donde el CE usa los canales ``0..K-1`` de ``f`` como logits de clase.

"""
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from panodeform import logger
from panodeform.exceptions import DatasetIOError
from panodeform.exceptions import DimensionError
from panodeform.exceptions import MissingBank
from panodeform.numcore import IGNORE_INDEX
from panodeform.numcore import Tensor
from panodeform.numcore import as_tensor
from panodeform.numcore import cross_entropy
from panodeform.numcore import kl_div
from panodeform.numcore import no_grad
from panodeform.numcore import softmax
from panodeform.schemas import AdaptConfig
from panodeform.schemas import AdaptMode
from panodeform.schemas import LabeledScene
from panodeform.trans4pass import Trans4PASS
from panodeform.trans4pass import embed_multiscale
from panodeform.utils.tensor_file import load_array
from panodeform.utils.tensor_file import save_array

PathLike = Union[str, Path]


def pseudo_label(
    logits: Union[Tensor, np.ndarray], threshold: Optional[float] = None
) -> np.ndarray:
    """Argmax por pixel; empates van a la clase de menor índice.

    Con ``threshold`` los pixeles cuya probabilidad máxima queda bajo el
    umbral se marcan como ``IGNORE_INDEX``.

    """
    values = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    labels = np.argmax(values, axis=-1).astype(np.int64)
    if threshold is not None:
        shifted = np.exp(values - values.max(axis=-1, keepdims=True))
        confidence = 1.0 / shifted.sum(axis=-1)
        labels[confidence < threshold] = IGNORE_INDEX
    return labels


def downsample_labels(
    labels: np.ndarray, height: int, width: int
) -> np.ndarray:
    """Vecino más cercano con centros align-corners=false.

    La fila ``i`` de salida lee la fila ``floor((i + .5) H / h)`` de
    entrada; sirve también para agrandar.

    """
    src_h, src_w = labels.shape
    rows = np.minimum(
        np.floor((np.arange(height) + 0.5) * src_h / height).astype(int),
        src_h - 1,
    )
    cols = np.minimum(
        np.floor((np.arange(width) + 0.5) * src_w / width).astype(int),
        src_w - 1,
    )
    return labels[rows[:, None], cols[None, :]]


class PrototypeBank:
    """Prototipos ``K x C_emb`` con estado de momentum.

    Un prototipo participa de los targets sólo si está inicializado.

    """

    def __init__(self, classes: int, channels: int, momentum: float = 0.999):
        if not 0 < momentum < 1:
            raise DimensionError(op="PrototypeBank", detail="m fuera de (0,1)")
        self.classes = classes
        self.channels = channels
        self.momentum = momentum
        self.prototypes = np.zeros((classes, channels))
        self.initialized = np.zeros(classes, dtype=bool)
        self.update_count = np.zeros(classes, dtype=np.int64)

    def __repr__(self) -> str:
        return "PrototypeBank(classes={}, initialized={})".format(
            self.classes, int(self.initialized.sum())
        )

    @property
    def ready(self) -> bool:
        return bool(self.initialized.any())

    def snapshot(self) -> "PrototypeBank":
        bank = PrototypeBank(self.classes, self.channels, self.momentum)
        bank.prototypes = self.prototypes.copy()
        bank.initialized = self.initialized.copy()
        bank.update_count = self.update_count.copy()
        return bank

    def check_shapes(self, embeddings: np.ndarray, labels: np.ndarray) -> None:
        if embeddings.shape[:-1] != labels.shape:
            raise DimensionError(
                op="update_bank",
                detail="{} vs {}".format(embeddings.shape, labels.shape),
            )
        if embeddings.shape[-1] != self.channels:
            raise DimensionError(
                op="update_bank",
                detail="C={} en un banco de C={}".format(
                    embeddings.shape[-1], self.channels
                ),
            )


def class_sums(
    embeddings: np.ndarray, labels: np.ndarray, classes: int
) -> Tuple[np.ndarray, np.ndarray]:
    """Suma de embeddings y cuenta de pixeles por clase (ignora 255)."""
    flat = embeddings.reshape(-1, embeddings.shape[-1])
    target = labels.reshape(-1)
    valid = (target != IGNORE_INDEX) & (target >= 0) & (target < classes)
    sums = np.zeros((classes, flat.shape[1]))
    np.add.at(sums, target[valid], flat[valid])
    counts = np.bincount(target[valid], minlength=classes)[:classes]
    return sums, counts


def update_bank(
    bank: PrototypeBank, embeddings: np.ndarray, labels: np.ndarray
) -> PrototypeBank:
    """EMA ``P <- m P + (1 - m) media_batch`` para las clases presentes.

    Las clases ausentes no cambian; una clase sin inicializar toma la
    media del batch directamente.

    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    bank.check_shapes(embeddings, labels)
    sums, counts = class_sums(embeddings, labels, bank.classes)
    for k in np.nonzero(counts)[0]:
        mean = sums[k] / counts[k]
        if bank.initialized[k]:
            bank.prototypes[k] = (
                bank.momentum * bank.prototypes[k]
                + (1 - bank.momentum) * mean
            )
        else:
            bank.prototypes[k] = mean
            bank.initialized[k] = True
        bank.update_count[k] += 1
    return bank


def init_bank(  # pylint: disable=too-many-arguments
    model: Trans4PASS,
    source: Sequence[LabeledScene],
    target: Sequence[LabeledScene],
    momentum: float = 0.999,
    scales: Sequence[float] = (1.0,),
    threshold: Optional[float] = None,
) -> PrototypeBank:
    """Media por clase de las features fusionadas sobre ambos dominios.

    La fuente aporta sus labels; el objetivo, los pseudo-labels del
    modelo actual. Ambos se llevan a la grilla ``H/4 x W/4`` por vecino
    más cercano. Una clase que no aparece queda sin inicializar.

    """
    cfg = model.cfg
    single_scale = tuple(scales) == (1.0,)
    sums = np.zeros((cfg.classes, cfg.embed_dim))
    counts = np.zeros(cfg.classes, dtype=np.int64)
    for scene, domain in [(s, "source") for s in source] + [
        (t, "target") for t in target
    ]:
        logits = None
        if single_scale:
            with no_grad():
                logits, fused = model.forward_features(Tensor(scene.image))
            fused = fused.data
        else:
            fused = embed_multiscale(model, scene.image, scales)
        if domain == "source":
            labels = scene.labels
        else:
            if logits is None:
                with no_grad():
                    logits = model(Tensor(scene.image))
            labels = pseudo_label(logits, threshold)
        labels = downsample_labels(labels, *fused.shape[:2])
        scene_sums, scene_counts = class_sums(fused, labels, cfg.classes)
        sums += scene_sums
        counts += scene_counts

    bank = PrototypeBank(cfg.classes, cfg.embed_dim, momentum)
    present = counts > 0
    bank.prototypes[present] = sums[present] / counts[present, None]
    bank.initialized = present
    logger.info(
        "banco inicializado",
        source=len(source),
        target=len(target),
        initialized=int(present.sum()),
        pixels=counts.tolist(),
    )
    return bank


def prototypical_map(
    bank: PrototypeBank, labels: np.ndarray
) -> Tuple[Tensor, np.ndarray]:
    """``f_hat(i, j) = P_{labels(i, j)}`` y la máscara de pixeles válidos.

    Pixeles ignorados o de clases sin inicializar quedan en cero y fuera
    de la máscara.

    """
    labels = np.asarray(labels)
    valid = (labels != IGNORE_INDEX) & (labels >= 0) & (labels < bank.classes)
    safe = np.where(valid, labels, 0)
    mask = valid & bank.initialized[safe]
    values = bank.prototypes[safe] * mask[..., None]
    return Tensor(values), mask


def mpa_loss(
    f: Tensor,
    f_hat,
    labels: np.ndarray,
    cfg: AdaptConfig,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Destilación prototípica, promedio sobre pixeles válidos.

    Args:
        f: Features fusionadas ``h x w x C_emb``.
        f_hat: Mapa prototípico de igual forma (constante).
        labels: ``h x w``; clase ``k`` se lee en el canal ``k``.
        cfg: ``temperature`` y ``lam``.
        mask: Pixeles que participan; por defecto los no ignorados.

    """
    f_hat = as_tensor(f_hat).detach()
    if f.shape != f_hat.shape or f.shape[:-1] != np.shape(labels):
        raise DimensionError(
            op="mpa_loss",
            detail="f {} f_hat {} labels {}".format(
                f.shape, f_hat.shape, np.shape(labels)
            ),
        )
    labels = np.asarray(labels)
    if mask is None:
        mask = labels != IGNORE_INDEX
    masked_labels = np.where(mask, labels, IGNORE_INDEX)
    temperature = cfg.temperature
    p_ref = softmax(f_hat * (1.0 / temperature), axis=-1)
    p = softmax(f * (1.0 / temperature), axis=-1)
    kl = kl_div(p_ref, p, mask)
    ce = cross_entropy(f, masked_labels)
    return kl * (cfg.lam * temperature ** 2) + ce * (1 - cfg.lam)


@dataclass
class DomainOutput:
    """Forward de una escena: logits ``H x W x K``, features ``h x w x C``
    y labels (reales o pseudo) a resolución completa."""

    logits: Tensor
    fused: Tensor
    labels: np.ndarray

    def feature_labels(self) -> np.ndarray:
        return downsample_labels(self.labels, *self.fused.shape[:2])


LOSS_PARTS = ("loss_seg", "loss_ssl", "loss_mpa_s", "loss_mpa_t")


def _mean(losses: List[Tensor]) -> Tensor:
    total = losses[0]
    for loss in losses[1:]:
        total = total + loss
    return total * (1.0 / len(losses))


def total_loss(
    source: Sequence[DomainOutput],
    target: Sequence[DomainOutput],
    bank: Optional[PrototypeBank],
    cfg: AdaptConfig,
    mode: AdaptMode = AdaptMode.mpa_ssl,
) -> Tuple[Tensor, Dict[str, float]]:
    """``SEG + SSL + alpha (MPA_s + MPA_t)`` según ``mode``.

    Retorna la pérdida total y sus componentes ya ponderados (la suma de
    los componentes es el total). Cada término es el promedio sobre las
    escenas del batch.

    """
    mode = AdaptMode(mode)
    if mode.uses_bank and (bank is None or not bank.ready):
        raise MissingBank(mode=mode.value)
    zero = Tensor(0.0)
    seg = _mean([cross_entropy(o.logits, o.labels) for o in source])
    ssl = zero
    if mode.uses_pseudo_labels and target:
        ssl = _mean([cross_entropy(o.logits, o.labels) for o in target])
    mpa_s, mpa_t = zero, zero
    if mode.uses_bank and cfg.alpha > 0:

        def domain_mpa(outputs: Sequence[DomainOutput]) -> Tensor:
            losses = []
            for output in outputs:
                labels = output.feature_labels()
                f_hat, mask = prototypical_map(bank, labels)
                losses.append(mpa_loss(output.fused, f_hat, labels, cfg, mask))
            return _mean(losses) * cfg.alpha

        mpa_s = domain_mpa(source)
        if target:
            mpa_t = domain_mpa(target)
    total = seg + ssl + mpa_s + mpa_t
    parts = {
        "loss_seg": seg.item(),
        "loss_ssl": ssl.item(),
        "loss_mpa_s": mpa_s.item(),
        "loss_mpa_t": mpa_t.item(),
    }
    return total, parts


def save_bank(bank: PrototypeBank, directory: PathLike) -> Path:
    """``bank.pdt`` (prototipos) + ``bank.json`` (estado por clase)."""
    directory = Path(directory)
    save_array(directory / "bank.pdt", bank.prototypes)
    state = {
        "momentum": bank.momentum,
        "classes": {
            str(k): {
                "initialized": bool(bank.initialized[k]),
                "update_count": int(bank.update_count[k]),
            }
            for k in range(bank.classes)
        },
    }
    path = directory / "bank.json"
    try:
        path.write_text(json.dumps(state, indent=2, sort_keys=True))
    except OSError as error:
        raise DatasetIOError(path=path, detail=error)
    return path


def load_bank(directory: PathLike) -> PrototypeBank:
    directory = Path(directory)
    path = directory / "bank.json"
    try:
        state = json.loads(path.read_text())
    except (OSError, ValueError) as error:
        raise DatasetIOError(path=path, detail=error)
    prototypes = load_array(directory / "bank.pdt")
    bank = PrototypeBank(
        prototypes.shape[0], prototypes.shape[1], state["momentum"]
    )
    bank.prototypes = prototypes
    for key, entry in state["classes"].items():
        bank.initialized[int(key)] = entry["initialized"]
        bank.update_count[int(key)] = entry["update_count"]
    return bank
