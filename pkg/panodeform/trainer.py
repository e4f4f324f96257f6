# -*- coding: utf-8 -*-
"""Loops de optimización: entrenamiento en la fuente y adaptación.

AdamW con weight decay desacoplado y learning rate poly. Cada iteración
escribe una línea JSON ``{iter, lr, loss_seg, loss_ssl, loss_mpa_s,
loss_mpa_t, total}``; ``total`` es la suma de los componentes.

El optimizador se crea de nuevo para la adaptación (estado AdamW
limpio). Los batches de fuente y objetivo se muestrean de forma
independiente en cada iteración.

"""
import json
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from tqdm import tqdm

from panodeform import S
from panodeform import logger
from panodeform.exceptions import DatasetIOError
from panodeform.exceptions import DimensionError
from panodeform.exceptions import InvalidSize
from panodeform.exceptions import MissingBank
from panodeform.layers import Parameter
from panodeform.metrics import ConfusionMatrix
from panodeform.metrics import PolarBreakdown
from panodeform.metrics import evaluate_predictions
from panodeform.mpa import LOSS_PARTS
from panodeform.mpa import DomainOutput
from panodeform.mpa import PrototypeBank
from panodeform.mpa import downsample_labels
from panodeform.mpa import pseudo_label
from panodeform.mpa import total_loss
from panodeform.mpa import update_bank
from panodeform.numcore import IGNORE_INDEX
from panodeform.numcore import cross_entropy
from panodeform.numcore import resize_array
from panodeform.schemas import AdaptConfig
from panodeform.schemas import AdaptMode
from panodeform.schemas import AugmentConfig
from panodeform.schemas import LabeledScene
from panodeform.schemas import ModelConfig
from panodeform.schemas import TrainConfig
from panodeform.trans4pass import Trans4PASS
from panodeform.utils.rng import RngStreams
from panodeform.utils.tensor_file import load_parameters
from panodeform.utils.tensor_file import save_parameters

PathLike = Union[str, Path]


def poly_lr(iteration: int, max_iter: int, lr0: float, power: float) -> float:
    """``lr0 (1 - iter / max_iter) ** power``."""
    if max_iter <= 0 or not 0 <= iteration <= max_iter:
        raise InvalidSize(size=(iteration, max_iter), op="poly_lr")
    return lr0 * (1.0 - iteration / max_iter) ** power


@dataclass
class AdamState:
    """Momentos por nombre de parámetro y contador de pasos."""

    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Dict[str, Parameter],
    grads: Dict[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> Dict[str, Parameter]:
    """Un paso AdamW con momentos corregidos por sesgo.

    El decay se aplica antes del paso de Adam: ``p <- p (1 - lr wd)``. Un
    gradiente ausente cuenta como cero.

    """
    beta1, beta2 = cfg.betas
    state.step += 1
    correction1 = 1 - beta1 ** state.step
    correction2 = 1 - beta2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        grad = np.zeros_like(param.data) if grad is None else grad
        if grad.shape != param.shape:
            raise DimensionError(
                op="adamw_step",
                detail="{}: {} vs {}".format(name, grad.shape, param.shape),
            )
        m = state.m.get(name, np.zeros_like(param.data))
        v = state.v.get(name, np.zeros_like(param.data))
        if m.shape != param.shape:
            raise DimensionError(op="adamw_step", detail=name)
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        state.m[name], state.v[name] = m, v
        value = param.data * (1 - lr * cfg.weight_decay)
        value = value - lr * (m / correction1) / (
            np.sqrt(v / correction2) + cfg.eps
        )
        param.data = value
    return params


class AdamW:
    """Optimizador sobre los parámetros nombrados de un módulo."""

    def __init__(self, model, cfg: TrainConfig):
        self.params = dict(model.named_parameters())
        self.cfg = cfg
        self.state = AdamState()

    def step(self, lr: float) -> None:
        grads = {name: p.grad for name, p in self.params.items()}
        adamw_step(self.params, grads, self.state, lr, self.cfg)


def _place(extent: int, target: int, rng, random: bool):
    """Slices origen/destino para recortar o rellenar un eje."""
    if extent >= target:
        offset = int(rng.integers(0, extent - target + 1)) if random else (
            (extent - target) // 2
        )
        return slice(offset, offset + target), slice(0, target)
    offset = int(rng.integers(0, target - extent + 1)) if random else (
        (target - extent) // 2
    )
    return slice(0, extent), slice(offset, offset + extent)


def augment(
    scene: LabeledScene,
    cfg: AugmentConfig,
    rng: np.random.Generator,
    size: Optional[Tuple[int, int]] = None,
) -> LabeledScene:
    """Resize aleatorio, flip horizontal y recorte al tamaño de entrenamiento.

    La imagen se remuestrea bilinealmente y los labels por vecino más
    cercano. Si la imagen queda más chica que ``size`` se rellena con
    ceros y ``IGNORE_INDEX``.

    """
    out_h, out_w = size or (scene.height, scene.width)
    image, labels = scene.image, scene.labels
    if cfg.resize:
        ratio = float(rng.uniform(*cfg.ratio_range))
        new_h = max(1, int(round(scene.height * ratio)))
        new_w = max(1, int(round(scene.width * ratio)))
        if (new_h, new_w) != image.shape[:2]:
            image = np.clip(resize_array(image, new_h, new_w), 0.0, 1.0)
            if labels is not None:
                labels = downsample_labels(labels, new_h, new_w)
    if cfg.flip and rng.random() < 0.5:
        image = image[:, ::-1]
        labels = labels[:, ::-1] if labels is not None else None
    if image.shape[:2] != (out_h, out_w):
        rows_src, rows_dst = _place(image.shape[0], out_h, rng, cfg.crop)
        cols_src, cols_dst = _place(image.shape[1], out_w, rng, cfg.crop)
        canvas = np.zeros((out_h, out_w, 3))
        canvas[rows_dst, cols_dst] = image[rows_src, cols_src]
        image = canvas
        if labels is not None:
            label_canvas = np.full(
                (out_h, out_w), IGNORE_INDEX, dtype=np.int64
            )
            label_canvas[rows_dst, cols_dst] = labels[rows_src, cols_src]
            labels = label_canvas
    return scene.copy(
        update={
            "image": np.ascontiguousarray(image),
            "labels": None if labels is None else np.ascontiguousarray(labels),
        }
    )


class JsonlLog:
    """Archivo JSON-lines (o nada si ``path`` es ``None``)."""

    def __init__(self, path: Optional[PathLike]):
        self.path = Path(path) if path is not None else None
        self._handle = None

    def __enter__(self) -> "JsonlLog":
        if self.path is not None:
            try:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                self._handle = self.path.open("w")
            except OSError as error:
                raise DatasetIOError(path=self.path, detail=error)
        return self

    def __exit__(self, *exc) -> None:
        if self._handle is not None:
            self._handle.close()

    def write(self, record: Dict) -> None:
        if self._handle is not None:
            self._handle.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path: PathLike) -> List[Dict]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as error:
        raise DatasetIOError(path=path, detail=error)
    return [json.loads(line) for line in lines if line.strip()]


@dataclass
class TrainResult:
    history: List[Dict] = field(default_factory=list)

    @property
    def initial_loss(self) -> Optional[float]:
        return self.history[0]["total"] if self.history else None

    @property
    def final_loss(self) -> Optional[float]:
        return self.history[-1]["total"] if self.history else None


def _record(iteration: int, lr: float, parts: Dict[str, float]) -> Dict:
    record = {"iter": iteration, "lr": lr}
    record.update({name: parts.get(name, 0.0) for name in LOSS_PARTS})
    record["total"] = sum(parts.get(name, 0.0) for name in LOSS_PARTS)
    return record


def _batch(
    scenes: Sequence[LabeledScene],
    batch_size: int,
    streams: RngStreams,
    prefix: str,
    cfg: TrainConfig,
) -> List[LabeledScene]:
    picks = streams[prefix + "data"].integers(0, len(scenes), size=batch_size)
    return [
        augment(
            scenes[int(i)],
            cfg.augment,
            streams[prefix + "augment"],
            (scenes[int(i)].height, scenes[int(i)].width),
        )
        for i in picks
    ]


def train_source(
    model: Trans4PASS,
    scenes: Sequence[LabeledScene],
    cfg: TrainConfig,
    seed: int = 0,
    log_path: Optional[PathLike] = None,
    iterations: Optional[int] = None,
) -> TrainResult:
    """Minimiza el CE de segmentación sobre las escenas pinhole etiquetadas."""
    if not scenes:
        raise InvalidSize(size=0, op="train_source")
    streams = RngStreams(seed)
    optimizer = AdamW(model, cfg)
    max_iters = cfg.max_iters if iterations is None else iterations
    result = TrainResult()
    with JsonlLog(log_path) as log:
        for iteration in tqdm(
            range(max_iters), desc="source", disable=not S.PROGRESS
        ):
            lr = poly_lr(iteration, max_iters, cfg.lr0, cfg.power)
            batch = _batch(scenes, cfg.batch_size, streams, "", cfg)
            model.zero_grad()
            loss = None
            for scene in batch:
                term = cross_entropy(model(scene.tensor()), scene.labels)
                loss = term if loss is None else loss + term
            loss = loss * (1.0 / len(batch))
            loss.backward()
            optimizer.step(lr)
            record = _record(iteration, lr, {"loss_seg": loss.item()})
            log.write(record)
            result.history.append(record)
            logger.debug("iteracion", stage="source", **record)
    logger.info(
        "entrenamiento en fuente terminado",
        iterations=max_iters,
        initial=result.initial_loss,
        final=result.final_loss,
    )
    return result


def adapt(  # pylint: disable=too-many-arguments,too-many-locals
    model: Trans4PASS,
    bank: Optional[PrototypeBank],
    source: Sequence[LabeledScene],
    target: Sequence[LabeledScene],
    cfg: TrainConfig,
    adapt_cfg: AdaptConfig,
    mode: AdaptMode,
    seed: int = 0,
    log_path: Optional[PathLike] = None,
    iterations: Optional[int] = None,
) -> TrainResult:
    """Adapta con el objetivo de ``mode``; ``none`` no hace nada.

    En los modos con banco, el banco se actualiza en línea después de
    calcular la pérdida, con los embeddings y labels (reales o pseudo)
    de ambos dominios del batch.

    """
    mode = AdaptMode(mode)
    result = TrainResult()
    if mode == AdaptMode.none:
        return result
    if mode.uses_bank and (bank is None or not bank.ready):
        raise MissingBank(mode=mode.value)
    streams = RngStreams(seed)
    optimizer = AdamW(model, cfg)
    max_iters = cfg.adapt_iters if iterations is None else iterations
    with JsonlLog(log_path) as log:
        for iteration in tqdm(
            range(max_iters), desc=mode.value, disable=not S.PROGRESS
        ):
            lr = poly_lr(iteration, max_iters, cfg.lr0, cfg.power)
            src = _batch(source, cfg.batch_size, streams, "adapt.source.", cfg)
            tgt = _batch(target, cfg.batch_size, streams, "adapt.target.", cfg)
            model.zero_grad()
            source_out = []
            for scene in src:
                logits, fused = model.forward_features(scene.tensor())
                source_out.append(DomainOutput(logits, fused, scene.labels))
            target_out = []
            for scene in tgt:
                logits, fused = model.forward_features(scene.tensor())
                labels = pseudo_label(logits, adapt_cfg.pseudo_threshold)
                target_out.append(DomainOutput(logits, fused, labels))
            loss, parts = total_loss(
                source_out, target_out, bank, adapt_cfg, mode
            )
            loss.backward()
            optimizer.step(lr)
            if mode.uses_bank:
                channels = bank.channels
                outputs = source_out + target_out
                update_bank(
                    bank,
                    np.concatenate(
                        [o.fused.data.reshape(-1, channels) for o in outputs]
                    ),
                    np.concatenate(
                        [o.feature_labels().reshape(-1) for o in outputs]
                    ),
                )
            record = _record(iteration, lr, parts)
            log.write(record)
            result.history.append(record)
            logger.debug("iteracion", stage=mode.value, **record)
    logger.info(
        "adaptación terminada",
        mode=mode.value,
        iterations=max_iters,
        final=result.final_loss,
    )
    return result


def evaluate(
    model: Trans4PASS,
    scenes: Sequence[LabeledScene],
    n_sectors: int = 8,
    polar: bool = True,
) -> Tuple[ConfusionMatrix, Optional[PolarBreakdown]]:
    """Matriz de confusión global y desglose polar sobre escenas con
    labels."""
    pairs = [
        (model.predict(scene.image), scene.labels)
        for scene in scenes
        if scene.labels is not None
    ]
    return evaluate_predictions(
        pairs, model.cfg.classes, n_sectors=n_sectors, polar=polar
    )


def save_checkpoint(model: Trans4PASS, directory: PathLike) -> Path:
    """``model.json`` (configuración) + índice de parámetros + blobs PDT1."""
    directory = Path(directory)
    save_parameters(directory, model.state_dict())
    path = directory / "model.json"
    try:
        path.write_text(model.cfg.json(indent=2, sort_keys=True))
    except OSError as error:
        raise DatasetIOError(path=path, detail=error)
    return directory


def load_checkpoint(directory: PathLike) -> Trans4PASS:
    directory = Path(directory)
    path = directory / "model.json"
    try:
        cfg = ModelConfig(**json.loads(path.read_text()))
    except (OSError, ValueError) as error:
        raise DatasetIOError(path=path, detail=error)
    model = Trans4PASS(cfg)
    model.load_state_dict(load_parameters(directory))
    return model
