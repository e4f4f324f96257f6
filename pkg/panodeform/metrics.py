# -*- coding: utf-8 -*-
"""Matriz de confusión, IoU y evaluación polar por sectores."""
import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np

from panodeform.exceptions import DatasetIOError
from panodeform.exceptions import DimensionError
from panodeform.numcore import IGNORE_INDEX
from panodeform.schemas import EvalReport
from panodeform.schemas import SectorResult

PathLike = Union[str, Path]

SECTORS = 8


class ConfusionMatrix:
    """Cuentas ``K x K``: filas ground truth, columnas predicción."""

    def __init__(self, classes: int, counts: Optional[np.ndarray] = None):
        self.classes = classes
        self.counts = (
            np.zeros((classes, classes), dtype=np.int64)
            if counts is None
            else np.asarray(counts, dtype=np.int64)
        )

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.classes != self.classes:
            raise DimensionError(op="ConfusionMatrix", detail="K distinto")
        return ConfusionMatrix(self.classes, self.counts + other.counts)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(
            self.counts, other.counts
        )

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def copy(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.classes, self.counts.copy())


def accumulate(
    cm: ConfusionMatrix, pred: np.ndarray, gt: np.ndarray
) -> ConfusionMatrix:
    """Suma los pares (gt, pred) a una copia de ``cm``; omite ``gt == 255``."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(
            op="accumulate", detail="{} vs {}".format(pred.shape, gt.shape)
        )
    valid = (gt != IGNORE_INDEX) & (gt >= 0) & (gt < cm.classes)
    if np.any((pred[valid] < 0) | (pred[valid] >= cm.classes)):
        raise DimensionError(op="accumulate", detail="predicción fuera de K")
    index = cm.classes * gt[valid].astype(np.int64) + pred[valid]
    counts = np.bincount(index, minlength=cm.classes ** 2)
    return ConfusionMatrix(
        cm.classes, cm.counts + counts.reshape(cm.classes, cm.classes)
    )


@dataclass
class IoUResult:
    """IoU por clase en ``[0, 1]`` (``None`` si la unión es vacía) y mIoU
    en puntos porcentuales."""

    per_class: List[Optional[float]]
    miou: Optional[float]
    pixel_accuracy: Optional[float]


def iou(cm: ConfusionMatrix) -> IoUResult:
    """``TP / (TP + FP + FN)``; las clases con unión vacía no entran a la
    media."""
    counts = cm.counts.astype(np.float64)
    tp = np.diag(counts)
    union = counts.sum(axis=0) + counts.sum(axis=1) - tp
    per_class: List[Optional[float]] = [
        float(tp[k] / union[k]) if union[k] > 0 else None
        for k in range(cm.classes)
    ]
    present = [value for value in per_class if value is not None]
    miou = 100.0 * float(np.mean(present)) if present else None
    total = counts.sum()
    accuracy = 100.0 * float(tp.sum() / total) if total > 0 else None
    return IoUResult(per_class=per_class, miou=miou, pixel_accuracy=accuracy)


def sector_bounds(
    width: int, n_sectors: int = SECTORS
) -> List[Tuple[int, int]]:
    """Columnas ``(inicio, fin)`` de cada sector, ``fin`` exclusivo módulo
    ``width``.

    El sector 0 queda centrado en la columna central (el frente) y los
    siguientes avanzan en azimut. Si ``width`` no es divisible por
    ``n_sectors`` las columnas sobrantes van al último sector.

    """
    size = max(width // n_sectors, 1)
    start = (width // 2 - size // 2) % width
    bounds = []
    for sector in range(n_sectors):
        begin = min(sector * size, width)
        end = width if sector == n_sectors - 1 else min(begin + size, width)
        bounds.append(((start + begin) % width, (start + end) % width))
    return bounds


def sector_index(width: int, n_sectors: int = SECTORS) -> np.ndarray:
    """Sector de cada columna."""
    size = max(width // n_sectors, 1)
    start = width // 2 - size // 2
    shifted = np.mod(np.arange(width) - start, width)
    return np.minimum(shifted // size, n_sectors - 1)


class PolarBreakdown:
    """Una matriz de confusión por sector azimutal."""

    def __init__(self, classes: int, n_sectors: int = SECTORS):
        self.classes = classes
        self.n_sectors = n_sectors
        self.matrices = [ConfusionMatrix(classes) for _ in range(n_sectors)]
        self.width: Optional[int] = None

    def add(self, pred: np.ndarray, gt: np.ndarray) -> "PolarBreakdown":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape or pred.ndim != 2:
            raise DimensionError(
                op="polar_eval", detail="{} vs {}".format(pred.shape, gt.shape)
            )
        width = gt.shape[1]
        if self.width is not None and width != self.width:
            raise DimensionError(op="polar_eval", detail="anchos distintos")
        self.width = width
        sectors = sector_index(width, self.n_sectors)
        for sector in range(self.n_sectors):
            columns = sectors == sector
            if columns.any():
                self.matrices[sector] = accumulate(
                    self.matrices[sector], pred[:, columns], gt[:, columns]
                )
        return self

    def pixels(self) -> List[int]:
        return [cm.total for cm in self.matrices]

    def mious(self) -> List[Optional[float]]:
        return [iou(cm).miou for cm in self.matrices]

    def results(self) -> List[SectorResult]:
        bounds = sector_bounds(self.width or 0, self.n_sectors)
        if not self.width:
            bounds = [(0, 0)] * self.n_sectors
        return [
            SectorResult(
                sector=sector,
                start_col=start,
                end_col=end,
                pixels=cm.total,
                miou=iou(cm).miou,
            )
            for sector, ((start, end), cm) in enumerate(
                zip(bounds, self.matrices)
            )
        ]


def polar_eval(
    pred: np.ndarray, gt: np.ndarray, classes: int, n_sectors: int = SECTORS
) -> List[Optional[float]]:
    """mIoU por sector azimutal de un panorama."""
    return PolarBreakdown(classes, n_sectors).add(pred, gt).mious()


def weighted_sector_miou(breakdown: PolarBreakdown) -> Optional[float]:
    """Promedio de los mIoU por sector ponderado por pixeles."""
    pairs = [
        (miou, pixels)
        for miou, pixels in zip(breakdown.mious(), breakdown.pixels())
        if miou is not None and pixels
    ]
    if not pairs:
        return None
    total = sum(pixels for _, pixels in pairs)
    return sum(miou * pixels for miou, pixels in pairs) / total


def report(
    cm: ConfusionMatrix,
    breakdown: Optional[PolarBreakdown] = None,
    source_miou: Optional[float] = None,
    mode: str = "none",
) -> EvalReport:
    """Arma el reporte; ``gap`` es mIoU pinhole menos mIoU panorama."""
    result = iou(cm)
    miou = result.miou if result.miou is not None else 0.0
    sectors = breakdown.mious() if breakdown is not None else []
    details = breakdown.results() if breakdown is not None else []
    return EvalReport(
        mode=mode,
        classes=cm.classes,
        per_class={str(k): v for k, v in enumerate(result.per_class)},
        miou=miou,
        pixel_accuracy=result.pixel_accuracy or 0.0,
        sectors=sectors,
        sector_details=details,
        source_miou=source_miou,
        gap=None if source_miou is None else source_miou - miou,
    )


def report_json(result: EvalReport) -> str:
    return json.dumps(result.dict(), indent=2, sort_keys=True) + "\n"


def _fmt(value: Optional[float], scale: float = 1.0) -> str:
    return "-" if value is None else "{:.2f}".format(value * scale)


def render_table(result: EvalReport) -> str:
    """Tabla de texto: IoU por clase, mIoU, sectores y gap."""
    lines = ["class  IoU(%)"]
    for name, value in result.per_class.items():
        lines.append("{:>5}  {:>6}".format(name, _fmt(value, 100.0)))
    lines.append("mIoU   {:>6}".format(_fmt(result.miou)))
    lines.append("pAcc   {:>6}".format(_fmt(result.pixel_accuracy)))
    if result.sectors:
        lines.append(
            "polar  " + " ".join(_fmt(value) for value in result.sectors)
        )
    if result.gap is not None:
        lines.append(
            "gap    {:>6} (pinhole {} - panorama {})".format(
                _fmt(result.gap), _fmt(result.source_miou), _fmt(result.miou)
            )
        )
    return "\n".join(lines) + "\n"


def polar_csv(result: EvalReport) -> str:
    """CSV ``sector,start_col,end_col,pixels,miou``."""
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["sector", "start_col", "end_col", "pixels", "miou"])
    for row in result.sector_details:
        writer.writerow(
            [
                row.sector,
                row.start_col,
                row.end_col,
                row.pixels,
                "" if row.miou is None else repr(row.miou),
            ]
        )
    return buffer.getvalue()


def write_report(
    result: EvalReport, directory: PathLike, stem: str = "eval"
) -> Path:
    """Escribe ``<stem>.json``, ``<stem>.txt`` y ``<stem>_polar.csv``."""
    directory = Path(directory)
    path = directory / (stem + ".json")
    try:
        directory.mkdir(parents=True, exist_ok=True)
        path.write_text(report_json(result))
        (directory / (stem + ".txt")).write_text(render_table(result))
        (directory / (stem + "_polar.csv")).write_text(polar_csv(result))
    except OSError as error:
        raise DatasetIOError(path=path, detail=error)
    return path


def read_report(path: PathLike) -> EvalReport:
    try:
        return EvalReport(**json.loads(Path(path).read_text()))
    except (OSError, ValueError) as error:
        raise DatasetIOError(path=path, detail=error)


def evaluate_predictions(
    pairs: Sequence[Tuple[np.ndarray, np.ndarray]],
    classes: int,
    n_sectors: int = SECTORS,
    polar: bool = True,
) -> Tuple[ConfusionMatrix, Optional[PolarBreakdown]]:
    """Acumula pares ``(pred, gt)`` en una matriz global y, opcionalmente,
    en el desglose polar."""
    cm = ConfusionMatrix(classes)
    breakdown = PolarBreakdown(classes, n_sectors) if polar else None
    for pred, gt in pairs:
        cm = accumulate(cm, pred, gt)
        if breakdown is not None:
            breakdown.add(pred, gt)
    return cm, breakdown
