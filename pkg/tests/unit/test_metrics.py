# -*- coding: utf-8 -*-
"""Pruebas de mIoU, desglose polar y reportes."""
import csv
import io

import numpy as np
import pytest

from panodeform.exceptions import DatasetIOError
from panodeform.exceptions import DimensionError
from panodeform.metrics import ConfusionMatrix
from panodeform.metrics import PolarBreakdown
from panodeform.metrics import accumulate
from panodeform.metrics import evaluate_predictions
from panodeform.metrics import iou
from panodeform.metrics import polar_csv
from panodeform.metrics import polar_eval
from panodeform.metrics import read_report
from panodeform.metrics import render_table
from panodeform.metrics import report
from panodeform.metrics import sector_bounds
from panodeform.metrics import sector_index
from panodeform.metrics import weighted_sector_miou
from panodeform.metrics import write_report
from panodeform.numcore import IGNORE_INDEX

from . import brute_confusion


def test_accumulate_matches_brute_force(rng):
    cm = ConfusionMatrix(4)
    expected = np.zeros((4, 4), dtype=np.int64)
    for _ in range(5):
        pred = rng.integers(0, 4, size=(6, 9))
        gt = rng.integers(0, 4, size=(6, 9))
        gt[rng.random((6, 9)) < 0.2] = IGNORE_INDEX
        cm = accumulate(cm, pred, gt)
        expected += brute_confusion(pred, gt, 4)
    np.testing.assert_array_equal(cm.counts, expected)


def test_accumulate_does_not_mutate(rng):
    cm = ConfusionMatrix(2)
    accumulate(cm, np.zeros((2, 2), int), np.ones((2, 2), int))
    assert cm.total == 0


def test_accumulate_errors():
    cm = ConfusionMatrix(2)
    with pytest.raises(DimensionError):
        accumulate(cm, np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(DimensionError):
        accumulate(cm, np.full((1, 2), 2), np.zeros((1, 2), int))
    with pytest.raises(DimensionError):
        cm + ConfusionMatrix(3)


def test_perfect_prediction():
    gt = np.array([[0, 1], [2, 2]])
    result = iou(accumulate(ConfusionMatrix(3), gt, gt))
    assert result.per_class == [1.0, 1.0, 1.0]
    assert result.miou == 100.0
    assert result.pixel_accuracy == 100.0


def test_iou_hand_case():
    # gt: 0 0 1 1 ; pred: 0 1 1 1
    cm = accumulate(
        ConfusionMatrix(3), np.array([[0, 1, 1, 1]]), np.array([[0, 0, 1, 1]])
    )
    result = iou(cm)
    assert result.per_class[0] == pytest.approx(1 / 2)
    assert result.per_class[1] == pytest.approx(2 / 3)
    # clase 2 no aparece: fuera de la media
    assert result.per_class[2] is None
    assert result.miou == pytest.approx(100 * (1 / 2 + 2 / 3) / 2)
    assert result.pixel_accuracy == pytest.approx(75.0)


def test_empty_matrix():
    result = iou(ConfusionMatrix(2))
    assert result.miou is None and result.pixel_accuracy is None


def test_miou_is_permutation_equivariant(rng):
    pred = rng.integers(0, 5, size=(10, 10))
    gt = rng.integers(0, 5, size=(10, 10))
    perm = rng.permutation(5)
    base = iou(accumulate(ConfusionMatrix(5), pred, gt))
    permuted = iou(accumulate(ConfusionMatrix(5), perm[pred], perm[gt]))
    assert permuted.miou == pytest.approx(base.miou, abs=1e-12)
    for k in range(5):
        assert permuted.per_class[perm[k]] == pytest.approx(
            base.per_class[k], abs=1e-12
        )


def test_polar_sectors_partition_columns(rng):
    pred = rng.integers(0, 3, size=(4, 20))
    gt = rng.integers(0, 3, size=(4, 20))
    breakdown = PolarBreakdown(3, 8).add(pred, gt)
    total = ConfusionMatrix(3)
    for cm in breakdown.matrices:
        total = total + cm
    assert total == accumulate(ConfusionMatrix(3), pred, gt)
    # 20 no es divisible por 8: el último sector absorbe el resto
    assert breakdown.pixels() == [8] * 7 + [24]


def test_sector_zero_is_centred_on_front():
    assert sector_bounds(16, 8)[0] == (7, 9)
    index = sector_index(16, 8)
    assert index[7] == index[8] == 0
    assert index[9] == 1
    # el sector 7 da la vuelta por el borde
    assert index[6] == 7
    assert sector_bounds(16, 8)[7] == (5, 7)


def test_polar_eval_localizes_errors():
    gt = np.zeros((2, 16), dtype=int)
    gt[:, ::2] = 1
    pred = gt.copy()
    pred[:, 7:9] = 1 - pred[:, 7:9]
    sectors = polar_eval(pred, gt, 2, 8)
    assert sectors[0] == 0.0
    assert all(value == 100.0 for value in sectors[1:])


def test_weighted_sector_miou(rng):
    gt = rng.integers(0, 3, size=(4, 16))
    pred = gt.copy()
    pred[:, :4] = (pred[:, :4] + 1) % 3
    breakdown = PolarBreakdown(3, 4).add(pred, gt)
    pixels = breakdown.pixels()
    expected = sum(
        m * p for m, p in zip(breakdown.mious(), pixels)
    ) / sum(pixels)
    assert weighted_sector_miou(breakdown) == pytest.approx(expected)
    assert weighted_sector_miou(PolarBreakdown(3, 4)) is None


def test_breakdown_rejects_mixed_widths():
    breakdown = PolarBreakdown(2, 4)
    breakdown.add(np.zeros((2, 8), int), np.zeros((2, 8), int))
    with pytest.raises(DimensionError):
        breakdown.add(np.zeros((2, 16), int), np.zeros((2, 16), int))


def sample_report(rng):
    pred = rng.integers(0, 3, size=(4, 16))
    gt = rng.integers(0, 3, size=(4, 16))
    cm, breakdown = evaluate_predictions([(pred, gt)], 3, n_sectors=4)
    return report(cm, breakdown, source_miou=80.0, mode="mpa+ssl")


def test_report_gap(rng):
    result = sample_report(rng)
    assert result.gap == pytest.approx(80.0 - result.miou)
    assert len(result.sectors) == 4
    assert len(result.sector_details) == 4
    assert report(ConfusionMatrix(3)).gap is None


def test_report_files(tmp_path, rng):
    result = sample_report(rng)
    path = write_report(result, tmp_path)
    assert read_report(path) == result
    assert "mIoU" in (tmp_path / "eval.txt").read_text()
    rows = list(csv.DictReader(io.StringIO(polar_csv(result))))
    assert [int(r["sector"]) for r in rows] == [0, 1, 2, 3]
    assert sum(int(r["pixels"]) for r in rows) == 64
    assert (tmp_path / "eval_polar.csv").read_text() == polar_csv(result)


def test_render_table_lists_classes(rng):
    table = render_table(sample_report(rng))
    assert table.splitlines()[0] == "class  IoU(%)"
    assert "gap" in table and "polar" in table


def test_read_missing_report(tmp_path):
    with pytest.raises(DatasetIOError):
        read_report(tmp_path / "eval.json")
