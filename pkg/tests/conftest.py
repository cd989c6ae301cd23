import os
import sys

import numpy as np
import pytest

# Add project root to path so tests can import mobe
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from mobe.model_store import generate_synthetic, save_model
from mobe.models import MoEConfig


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the desk-scale experiments that take minutes")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale experiment, only runs with --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    """Two layers of six tiny experts."""
    return MoEConfig(layers=2, experts=6, hidden=8, intermediate=5, top_k=2)


@pytest.fixture
def planted(small_config):
    """``(dense model, ground-truth factorized model)`` with m=2 SiLU bases at full rank."""
    return generate_synthetic(small_config, seed=7, mode="planted", basis_count=2)


@pytest.fixture
def gaussian(small_config):
    model, _ = generate_synthetic(small_config, seed=3, mode="gaussian")
    return model


@pytest.fixture
def dense_path(tmp_path, planted):
    """A planted dense checkpoint on disk."""
    path = tmp_path / "planted.moew"
    save_model(path, planted[0])
    return path
