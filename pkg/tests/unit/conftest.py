# content of conftest.py
import os

os.environ.setdefault("ENV", "testing")

import numpy as np  # noqa: E402  pylint: disable=wrong-import-position
import pytest  # noqa: E402  pylint: disable=wrong-import-position

from panodeform.cli import load_config  # noqa: E402
from panodeform.panogeo import build_datasets  # noqa: E402
from panodeform.panogeo import load_manifest  # noqa: E402
from panodeform.panogeo import load_split  # noqa: E402
from panodeform.schemas import ModelConfig  # noqa: E402
from panodeform.schemas import SceneSpec  # noqa: E402
from panodeform.trans4pass import Trans4PASS  # noqa: E402
from panodeform.utils.rng import stream  # noqa: E402

SMALL_SPEC = SceneSpec(pinhole_size=32, panorama_height=32)

# Run chico para pruebas de integración rápidas
FAST_OVERRIDES = [
    "scene.pinhole_size=32",
    "scene.panorama_height=32",
    "data.n_source=3",
    "data.n_target=3",
    "data.n_test=2",
    "data.n_source_test=2",
    "trainer.max_iters=3",
    "trainer.adapt_iters=2",
    "trainer.batch_size=1",
]


def pytest_addoption(parser):
    parser.addoption(
        "--runslow", action="store_true", default=False, help="run slow tests"
    )


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: mark test as slow to run")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        # --runslow given in cli: do not skip slow tests
        return
    skip_slow = pytest.mark.skip(reason="need --runslow option to run")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


@pytest.fixture()
def model():
    return Trans4PASS(ModelConfig(), stream(0, "init"))


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    build_datasets(SMALL_SPEC, 3, 3, 2, seed=7, out_dir=root, n_source_test=2)
    return root


@pytest.fixture(scope="session")
def manifest(dataset_dir):
    return load_manifest(dataset_dir)


@pytest.fixture(scope="session")
def source_scenes(dataset_dir, manifest):
    return load_split(dataset_dir, manifest, "source")


@pytest.fixture(scope="session")
def target_scenes(dataset_dir, manifest):
    return load_split(dataset_dir, manifest, "target")


@pytest.fixture(scope="session")
def test_scenes(dataset_dir, manifest):
    return load_split(dataset_dir, manifest, "test")


@pytest.fixture()
def fast_config():
    return load_config(overrides=FAST_OVERRIDES)
