# -*- coding: utf-8 -*-
"""Pruebas de prototipos, pseudo-labels y pérdidas de adaptación."""
import math

import numpy as np
import pytest

from panodeform.exceptions import DimensionError
from panodeform.exceptions import MissingBank
from panodeform.mpa import DomainOutput
from panodeform.mpa import LOSS_PARTS
from panodeform.mpa import PrototypeBank
from panodeform.mpa import downsample_labels
from panodeform.mpa import init_bank
from panodeform.mpa import load_bank
from panodeform.mpa import mpa_loss
from panodeform.mpa import prototypical_map
from panodeform.mpa import pseudo_label
from panodeform.mpa import save_bank
from panodeform.mpa import total_loss
from panodeform.mpa import update_bank
from panodeform.numcore import IGNORE_INDEX
from panodeform.numcore import Tensor
from panodeform.numcore import kl_div
from panodeform.numcore import softmax
from panodeform.schemas import AdaptConfig
from panodeform.schemas import AdaptMode
from panodeform.schemas import Domain
from panodeform.schemas import LabeledScene
from panodeform.trans4pass import embed_multiscale

from . import leaf


def softmax_row(values, temperature):
    scaled = [v / temperature for v in values]
    top = max(scaled)
    total = math.fsum(math.exp(v - top) for v in scaled)
    return [math.exp(v - top) / total for v in scaled]


def mpa_oracle(f, f_hat, labels, temperature, lam):
    """Pérdida pixel a pixel con aritmética escalar."""
    kl_terms, ce_terms = [], []
    for (i, j), k in np.ndenumerate(labels):
        if k == IGNORE_INDEX:
            continue
        p_ref = softmax_row(f_hat[i, j], temperature)
        p = softmax_row(f[i, j], temperature)
        kl_terms.append(
            math.fsum(a * math.log(a / b) for a, b in zip(p_ref, p))
        )
        row = list(f[i, j])
        top = max(row)
        log_norm = top + math.log(math.fsum(math.exp(v - top) for v in row))
        ce_terms.append(log_norm - row[k])
    kl = math.fsum(kl_terms) / len(kl_terms)
    ce = math.fsum(ce_terms) / len(ce_terms)
    return lam * temperature ** 2 * kl + (1 - lam) * ce


def test_ema_matches_unrolled_recursion(rng):
    bank = PrototypeBank(2, 3, momentum=0.9)
    expected = None
    for _ in range(6):
        embeddings = rng.standard_normal((4, 3))
        labels = np.array([0, 0, 1, IGNORE_INDEX])
        mean = embeddings[:2].mean(axis=0)
        expected = mean if expected is None else 0.9 * expected + 0.1 * mean
        update_bank(bank, embeddings, labels)
    np.testing.assert_allclose(bank.prototypes[0], expected, atol=1e-12)
    assert bank.update_count.tolist() == [6, 6]


def test_absent_class_is_unchanged(rng):
    bank = PrototypeBank(3, 2, momentum=0.5)
    update_bank(bank, rng.standard_normal((2, 2)), np.array([0, 1]))
    before = bank.prototypes.copy()
    update_bank(bank, rng.standard_normal((2, 2)), np.array([0, 0]))
    np.testing.assert_array_equal(bank.prototypes[1], before[1])
    assert not bank.initialized[2]
    assert bank.update_count.tolist() == [2, 1, 0]


def test_bank_rejects_wrong_shapes(rng):
    bank = PrototypeBank(2, 3)
    with pytest.raises(DimensionError):
        update_bank(bank, rng.standard_normal((4, 2)), np.zeros(4, int))
    with pytest.raises(DimensionError):
        update_bank(bank, rng.standard_normal((4, 3)), np.zeros(3, int))
    with pytest.raises(DimensionError):
        PrototypeBank(2, 3, momentum=1.0)


def test_mpa_loss_matches_scalar_oracle(rng):
    f = rng.standard_normal((2, 2, 4)) * 3
    f_hat = rng.standard_normal((2, 2, 4)) * 3
    labels = np.array([[0, 3], [IGNORE_INDEX, 1]])
    cfg = AdaptConfig(temperature=2.0, lam=0.7)
    loss = mpa_loss(Tensor(f), f_hat, labels, cfg).item()
    expected = mpa_oracle(f, f_hat, labels, 2.0, 0.7)
    assert loss == pytest.approx(expected, abs=1e-10)


def test_kl_term_vanishes_on_prototypes(rng):
    f = rng.standard_normal((3, 3, 4))
    labels = rng.integers(0, 4, size=(3, 3))
    cfg = AdaptConfig(temperature=20.0, lam=1.0)
    assert mpa_loss(Tensor(f), f, labels, cfg).item() == pytest.approx(
        0.0, abs=1e-12
    )


def test_mpa_loss_shapes(rng):
    cfg = AdaptConfig()
    with pytest.raises(DimensionError):
        mpa_loss(
            Tensor(np.zeros((2, 2, 4))),
            np.zeros((2, 3, 4)),
            np.zeros((2, 2), int),
            cfg,
        )


def test_mpa_loss_does_not_touch_prototypes(rng):
    f = leaf(rng.standard_normal((2, 2, 3)))
    f_hat = leaf(rng.standard_normal((2, 2, 3)))
    mpa_loss(f, f_hat, np.zeros((2, 2), int), AdaptConfig()).backward()
    assert f.grad is not None and np.abs(f.grad).max() > 0
    assert f_hat.grad is None


def test_pseudo_label_ties_and_threshold():
    logits = np.array([[[1.0, 1.0, 0.0], [0.0, 5.0, 0.0], [0.1, 0.0, 0.0]]])
    np.testing.assert_array_equal(pseudo_label(logits), [[0, 1, 0]])
    thresholded = pseudo_label(Tensor(logits), threshold=0.9)
    np.testing.assert_array_equal(
        thresholded, [[IGNORE_INDEX, 1, IGNORE_INDEX]]
    )


def test_downsample_labels():
    labels = np.arange(16).reshape(4, 4)
    np.testing.assert_array_equal(
        downsample_labels(labels, 2, 2), [[5, 7], [13, 15]]
    )
    np.testing.assert_array_equal(downsample_labels(labels, 4, 4), labels)
    up = downsample_labels(np.array([[1, 2]]), 2, 4)
    np.testing.assert_array_equal(up, [[1, 1, 2, 2], [1, 1, 2, 2]])


def test_prototypical_map_mask():
    bank = PrototypeBank(3, 2)
    bank.prototypes = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])
    bank.initialized = np.array([True, False, True])
    labels = np.array([[0, 1], [2, IGNORE_INDEX]])
    f_hat, mask = prototypical_map(bank, labels)
    np.testing.assert_array_equal(mask, [[True, False], [True, False]])
    np.testing.assert_array_equal(
        f_hat.data, [[[1, 2], [0, 0]], [[5, 6], [0, 0]]]
    )


def domain_output(rng, classes=5, labels=None):
    logits = leaf(rng.standard_normal((8, 8, classes)))
    fused = leaf(rng.standard_normal((2, 2, 6)))
    if labels is None:
        labels = rng.integers(0, classes, size=(8, 8))
    return DomainOutput(logits=logits, fused=fused, labels=labels)


def ready_bank(rng):
    bank = PrototypeBank(5, 6)
    update_bank(bank, rng.standard_normal((5, 6)), np.arange(5))
    return bank


@pytest.mark.parametrize("mode", list(AdaptMode))
def test_total_loss_parts_sum(rng, mode):
    source = [domain_output(rng), domain_output(rng)]
    target = [domain_output(rng)]
    cfg = AdaptConfig(alpha=0.01)
    total, parts = total_loss(source, target, ready_bank(rng), cfg, mode)
    assert set(parts) == set(LOSS_PARTS)
    assert total.item() == pytest.approx(sum(parts.values()), abs=1e-12)
    if not mode.uses_pseudo_labels:
        assert parts["loss_ssl"] == 0.0
    if not mode.uses_bank:
        assert parts["loss_mpa_s"] == parts["loss_mpa_t"] == 0.0
    else:
        assert parts["loss_mpa_s"] > 0 and parts["loss_mpa_t"] > 0


def test_total_loss_alpha_weighting(rng):
    source, target = [domain_output(rng)], [domain_output(rng)]
    bank = ready_bank(rng)
    _, base = total_loss(
        source, target, bank, AdaptConfig(alpha=0.01), AdaptMode.mpa
    )
    _, scaled = total_loss(
        source, target, bank, AdaptConfig(alpha=0.1), AdaptMode.mpa
    )
    assert scaled["loss_mpa_s"] == pytest.approx(10 * base["loss_mpa_s"])
    _, off = total_loss(
        source, target, bank, AdaptConfig(alpha=0.0), AdaptMode.mpa
    )
    assert off["loss_mpa_s"] == 0.0


@pytest.mark.parametrize("mode", [AdaptMode.mpa, AdaptMode.mpa_ssl])
def test_total_loss_needs_bank(rng, mode):
    source, target = [domain_output(rng)], [domain_output(rng)]
    with pytest.raises(MissingBank):
        total_loss(source, target, None, AdaptConfig(), mode)
    with pytest.raises(MissingBank):
        total_loss(source, target, PrototypeBank(5, 6), AdaptConfig(), mode)


def test_bank_round_trip(tmp_path, rng):
    bank = PrototypeBank(4, 3, momentum=0.99)
    update_bank(bank, rng.standard_normal((3, 3)), np.array([0, 2, 2]))
    save_bank(bank, tmp_path)
    loaded = load_bank(tmp_path)
    np.testing.assert_array_equal(loaded.prototypes, bank.prototypes)
    np.testing.assert_array_equal(loaded.initialized, bank.initialized)
    np.testing.assert_array_equal(loaded.update_count, bank.update_count)
    assert loaded.momentum == 0.99


def test_init_bank_is_class_mean(model, source_scenes, target_scenes):
    bank = init_bank(model, source_scenes, target_scenes, momentum=0.9)
    assert bank.prototypes.shape == (5, 32)
    assert bank.ready
    assert not bank.update_count.any()
    only_source = init_bank(model, source_scenes[:1], [], momentum=0.9)
    present = np.unique(
        downsample_labels(source_scenes[0].labels, 8, 8)
    )
    assert set(np.nonzero(only_source.initialized)[0]) == set(present)


def test_ema_single_step_arithmetic():
    bank = PrototypeBank(1, 1)
    bank.prototypes[:] = 1.0
    bank.initialized[:] = True
    update_bank(bank, np.zeros((1, 1)), np.array([0]))
    assert bank.prototypes[0, 0] == 0.999


@pytest.mark.parametrize("momentum", [0.5, 0.9, 0.999])
def test_ema_stays_in_hull(rng, momentum):
    bank = PrototypeBank(1, 4, momentum=momentum)
    low = high = None
    for _ in range(20):
        embeddings = rng.standard_normal((3, 4)) * 5
        mean = embeddings.mean(axis=0)
        low = mean if low is None else np.minimum(low, mean)
        high = mean if high is None else np.maximum(high, mean)
        update_bank(bank, embeddings, np.zeros(3, int))
        assert (bank.prototypes[0] >= low - 1e-12).all()
        assert (bank.prototypes[0] <= high + 1e-12).all()


def test_pseudo_label_threshold_above_one(rng):
    logits = rng.standard_normal((3, 4, 5))
    labels = pseudo_label(logits, threshold=1.1)
    assert (labels == IGNORE_INDEX).all()


@pytest.mark.parametrize("scale", [1e-3, 0.5, 7.0, 1e3])
def test_pseudo_label_ignores_positive_rescaling(rng, scale):
    logits = rng.standard_normal((4, 6, 5))
    np.testing.assert_array_equal(
        pseudo_label(logits * scale), pseudo_label(logits)
    )


def test_kl_vanishes_at_high_temperature(rng):
    f = rng.standard_normal((2, 2, 4)) * 3
    f_hat = rng.standard_normal((2, 2, 4)) * 3
    cold = kl_div(softmax(Tensor(f_hat)), softmax(Tensor(f))).item()
    hot = kl_div(
        softmax(Tensor(f_hat * 1e-6)), softmax(Tensor(f * 1e-6))
    ).item()
    assert cold > 0
    assert 0 <= hot <= 1e-6


def test_kl_averages_over_every_valid_pixel():
    p_ref = np.array([[0.5, 0.5], [0.9, 0.1], [0.2, 0.8]])
    p = np.array([[0.5, 0.5], [0.6, 0.4], [0.7, 0.3]])
    mask = np.array([True, True, False])
    row = 0.9 * math.log(0.9 / 0.6) + 0.1 * math.log(0.1 / 0.4)
    loss = kl_div(p_ref, Tensor(p), mask=mask).item()
    assert loss == pytest.approx(row / 2, abs=1e-14)


def scene(image, labels, name):
    return LabeledScene(
        id=name, domain=Domain.pinhole, image=image, labels=labels
    )


def test_single_class_pass_gives_global_mean(model, rng):
    scenes = [
        scene(rng.uniform(0, 1, (32, 32, 3)), np.zeros((32, 32), int), name)
        for name in "ab"
    ]
    bank = init_bank(model, scenes, [])
    fused = [embed_multiscale(model, s.image).reshape(-1, 32) for s in scenes]
    np.testing.assert_allclose(
        bank.prototypes[0], np.concatenate(fused).mean(axis=0), atol=1e-12
    )
    assert bank.initialized.tolist() == [True, False, False, False, False]


def test_init_bank_weights_by_pixel_count(model, rng):
    uniform = scene(
        rng.uniform(0, 1, (32, 32, 3)), np.zeros((32, 32), int), "a"
    )
    halves = np.zeros((32, 32), int)
    halves[:, 16:] = 1
    mixed = scene(rng.uniform(0, 1, (32, 32, 3)), halves, "b")
    bank = init_bank(model, [uniform, mixed], [])
    first = embed_multiscale(model, uniform.image)
    second = embed_multiscale(model, mixed.image)
    # a H/4 la mitad izquierda son las columnas 0..3
    class_0 = np.concatenate(
        [first.reshape(-1, 32), second[:, :4].reshape(-1, 32)]
    )
    np.testing.assert_allclose(
        bank.prototypes[0], class_0.mean(axis=0), atol=1e-12
    )
    np.testing.assert_allclose(
        bank.prototypes[1],
        second[:, 4:].reshape(-1, 32).mean(axis=0),
        atol=1e-12,
    )


def test_target_pseudo_labels_change_the_bank(
    model, source_scenes, target_scenes
):
    source_only = init_bank(model, source_scenes, [])
    mutual = init_bank(model, source_scenes, target_scenes)
    assert not np.array_equal(source_only.prototypes, mutual.prototypes)


def test_init_bank_runs_one_forward_per_scene(
    model, source_scenes, target_scenes, monkeypatch
):
    calls = []
    forward_features = model.forward_features

    def counted(x):
        calls.append(x.shape)
        return forward_features(x)

    monkeypatch.setattr(model, "forward_features", counted)
    init_bank(model, source_scenes, target_scenes)
    assert len(calls) == len(source_scenes) + len(target_scenes)
