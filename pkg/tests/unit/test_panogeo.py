# -*- coding: utf-8 -*-
"""Pruebas del generador sintético y del formato de dataset."""
import numpy as np
import pytest

from panodeform.exceptions import AspectRatioError
from panodeform.exceptions import DatasetIOError
from panodeform.exceptions import InvalidFov
from panodeform.exceptions import InvalidSize
from panodeform.exceptions import MissingSplit
from panodeform.numcore import IGNORE_INDEX
from panodeform.panogeo import SKY
from panodeform.panogeo import build_datasets
from panodeform.panogeo import checksum
from panodeform.panogeo import equirectangular_directions
from panodeform.panogeo import generate_sphere_world
from panodeform.panogeo import load_manifest
from panodeform.panogeo import load_scene
from panodeform.panogeo import panorama_footprint
from panodeform.panogeo import render_equirectangular
from panodeform.panogeo import render_pinhole
from panodeform.panogeo import split_entries
from panodeform.panogeo import to_angles
from panodeform.schemas import Domain
from panodeform.schemas import SceneSpec

from .conftest import SMALL_SPEC


def test_world_is_deterministic():
    spec = SceneSpec()
    a = render_equirectangular(generate_sphere_world(spec, 3), 16, 32)
    b = render_equirectangular(generate_sphere_world(spec, 3), 16, 32)
    np.testing.assert_array_equal(a.image, b.image)
    np.testing.assert_array_equal(a.labels, b.labels)
    c = render_equirectangular(generate_sphere_world(spec, 4), 16, 32)
    assert not np.array_equal(a.image, c.image)


def test_panorama_aspect_ratio():
    world = generate_sphere_world(SceneSpec(), 0)
    with pytest.raises(AspectRatioError):
        render_equirectangular(world, 16, 30)
    with pytest.raises(InvalidSize):
        render_equirectangular(world, 0, 0)


@pytest.mark.parametrize("fov", [0.0, 180.0, -10.0])
def test_pinhole_fov_range(fov):
    world = generate_sphere_world(SceneSpec(), 0)
    with pytest.raises(InvalidFov):
        render_pinhole(world, 8, 8, fov, 0.0, 0.0)


def test_scene_values():
    world = generate_sphere_world(SceneSpec(), 1)
    scene = render_equirectangular(world, 16, 32)
    assert scene.domain == Domain.panorama
    assert scene.image.shape == (16, 32, 3)
    assert scene.image.min() >= 0.0 and scene.image.max() <= 1.0
    assert scene.labels.min() >= 0 and scene.labels.max() < 5
    # la fila superior mira al cenit
    assert (scene.labels[0] == SKY).all()


def test_equirectangular_pixel_centres():
    directions = equirectangular_directions(2, 4)
    theta, elevation = to_angles(directions)
    np.testing.assert_allclose(
        theta[0], 2 * np.pi * (np.arange(4) + 0.5) / 4
    )
    np.testing.assert_allclose(elevation[:, 0], [np.pi / 4, -np.pi / 4])


def test_pinhole_centre_looks_at_panorama_centre():
    rows, cols = panorama_footprint(0.0, 0.0, 70.0, 1, 1, 32)
    assert rows[0, 0] == 16
    assert cols[0, 0] in (31, 32)


def test_pinhole_and_panorama_agree_on_footprint():
    spec = SceneSpec()
    agreement = []
    for seed in range(3):
        world = generate_sphere_world(spec, seed)
        pano = render_equirectangular(world, 512, 1024)
        for yaw, pitch in [(0.0, 0.0), (1.2, 0.1), (-2.5, -0.15)]:
            view = render_pinhole(world, 24, 24, spec.fov_deg, yaw, pitch)
            rows, cols = panorama_footprint(
                yaw, pitch, spec.fov_deg, 24, 24, 512
            )
            agreement.append(
                np.mean(view.labels == pano.labels[rows, cols])
            )
    assert np.mean(agreement) >= 0.98
    assert min(agreement) >= 0.95


def test_panorama_seam_is_continuous():
    for seed in range(4):
        world = generate_sphere_world(SceneSpec(), seed)
        labels = render_equirectangular(world, 64, 128).labels
        assert np.mean(labels[:, 0] == labels[:, -1]) >= 0.95


def test_two_class_worlds():
    spec = SceneSpec(classes=2)
    scene = render_equirectangular(generate_sphere_world(spec, 5), 16, 32)
    assert set(np.unique(scene.labels)) <= {0, 1}
    assert len(np.unique(scene.labels)) == 2


def test_manifest_splits(dataset_dir, manifest):
    assert len(manifest.source) == 3
    assert len(manifest.target) == 3
    assert len(manifest.test) == 2
    assert len(manifest.source_test) == 2
    assert all(e.domain == Domain.pinhole for e in manifest.source)
    assert all(e.labels is None for e in manifest.target)
    assert all(e.width == 2 * e.height for e in manifest.test)
    for entry in manifest.source:
        assert (entry.height, entry.width) == (32, 32)
        assert (dataset_dir / entry.image).exists()


def test_target_scenes_have_no_labels(dataset_dir, manifest):
    scene = load_scene(manifest.target[0], dataset_dir)
    assert scene.labels is None
    assert scene.image.shape == (32, 64, 3)


def test_loaded_labels(source_scenes):
    for scene in source_scenes:
        assert scene.labels.dtype == np.int64
        assert scene.labels.shape == (32, 32)
        assert not (scene.labels == IGNORE_INDEX).any()


def test_checksum_is_reproducible(tmp_path, dataset_dir, manifest):
    again = build_datasets(
        SMALL_SPEC, 3, 3, 2, seed=7, out_dir=tmp_path, n_source_test=2
    )
    assert checksum(tmp_path, again) == checksum(dataset_dir, manifest)
    other = build_datasets(
        SMALL_SPEC,
        3,
        3,
        2,
        seed=8,
        out_dir=tmp_path / "other",
        n_source_test=2,
    )
    assert checksum(tmp_path / "other", other) != checksum(
        dataset_dir, manifest
    )


def test_thread_count_does_not_change_data(tmp_path, dataset_dir, manifest):
    serial = build_datasets(
        SMALL_SPEC,
        3,
        3,
        2,
        seed=7,
        out_dir=tmp_path,
        n_source_test=2,
        threads=1,
    )
    assert serial == manifest
    assert checksum(tmp_path, serial) == checksum(dataset_dir, manifest)


def test_empty_split_is_rejected(tmp_path):
    with pytest.raises(InvalidSize):
        build_datasets(SMALL_SPEC, 0, 1, 1, seed=0, out_dir=tmp_path)


def test_unknown_split(manifest):
    with pytest.raises(MissingSplit):
        split_entries(manifest, "validation")


def test_missing_manifest(tmp_path):
    with pytest.raises(DatasetIOError):
        load_manifest(tmp_path)
