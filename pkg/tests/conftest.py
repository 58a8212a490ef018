"""Test suite configuration."""
import gzip
import os
import pathlib
import tempfile

import numpy as np
import pytest

from agscl.config import parse_config
from agscl.network import LayerSpec, init_network
from agscl.tasks import synth_tasks


def pytest_configure(config):
    """Pytest configuration hook."""
    config.addinivalue_line("markers", "e2e: mark as end-to-end test")


def pytest_collection_modifyitems(config, items):
    """Skip end-to-end tests unless a directory of IDX files is given."""
    if os.environ.get("AGSCL_IDX_DIR"):
        return
    skip = pytest.mark.skip(reason="set AGSCL_IDX_DIR to run end-to-end tests")
    for item in items:
        if "e2e" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def cleandir():
    """Make tests start and end in a clean temporary directory."""
    with tempfile.TemporaryDirectory() as newpath:
        old_cwd = os.getcwd()
        os.chdir(newpath)
        yield
        os.chdir(old_cwd)


@pytest.fixture
def rng():
    """Seeded generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def dense_specs():
    """Two small dense hidden layers."""
    return [LayerSpec.dense(6, 5), LayerSpec.dense(5, 4)]


@pytest.fixture
def dense_net(dense_specs, rng):
    """Small dense network with two heads."""
    return init_network(dense_specs, [3, 2], rng)


@pytest.fixture
def conv_specs():
    """Conv, padded conv, then dense, on a 1x6x6 input."""
    return [
        LayerSpec.conv2d(1, 6, 6, 3, (3, 3)),
        LayerSpec.conv2d(3, 4, 4, 2, (3, 3), padding=1),
        LayerSpec.dense(32, 4),
    ]


@pytest.fixture
def conv_net(conv_specs, rng):
    """Small conv network with two heads."""
    return init_network(conv_specs, [3, 2], rng)


@pytest.fixture
def small_stream():
    """Three easy two-class synthetic tasks."""
    return synth_tasks(3, 2, 8, 40, 6.0, seed=0)


def make_config(**overrides):
    """Tiny synthetic experiment, with top-level sections overridden."""
    raw = {
        "name": "tiny",
        "seeds": [0],
        "model": {"hidden": [{"units": 12}, {"units": 10}]},
        "tasks": {
            "kind": "synthetic",
            "n_tasks": 3,
            "classes_per_task": 2,
            "dim": 8,
            "samples": 40,
            "separation": 6.0,
        },
        "hyperparams": {
            "mu": 1.0,
            "lambda": 10.0,
            "rho": 0.5,
            "lr": 0.01,
            "epochs": 3,
            "batch_size": 16,
        },
        "aopc": {"fractions": [0.0, 0.5, 1.0]},
        "finetune_reference": True,
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(raw.get(key), dict):
            raw[key] = {**raw[key], **value}
        else:
            raw[key] = value
    return parse_config(raw)


@pytest.fixture
def config_factory():
    """Build tiny configurations with some sections overridden."""
    return make_config


@pytest.fixture
def tiny_config():
    """Tiny synthetic experiment configuration."""
    return make_config()


@pytest.fixture
def idx_writer():
    """Write arrays as IDX files."""
    return write_idx


def write_idx(path, array, magic, compress=False):
    """Write `array` (uint8) as a big-endian IDX file."""
    array = np.asarray(array, dtype=np.uint8)
    header = magic.to_bytes(4, "big")
    header += b"".join(int(d).to_bytes(4, "big") for d in array.shape)
    data = header + array.tobytes()
    path = pathlib.Path(path)
    path.write_bytes(gzip.compress(data) if compress else data)
    return path


@pytest.fixture
def idx_files(tmp_path):
    """Ten-class 4x4 image set, 12 examples per class, as IDX files."""
    rng = np.random.default_rng(5)
    labels = np.tile(np.arange(10, dtype=np.uint8), 12)
    images = rng.integers(0, 256, size=(len(labels), 4, 4), dtype=np.uint8)
    return {
        "train_images": write_idx(tmp_path / "images.idx", images, 0x803),
        "train_labels": write_idx(tmp_path / "labels.idx", labels, 0x801),
        "images": images,
        "labels": labels,
    }
