"""Shared fixtures for the simulator test suite."""

from dataclasses import replace

import numpy as np
import pytest

from experiment_config import load_config
from link_dynamics import DEFAULT_SETTINGS, LinkModel, NodeModel

TWO_PI_MHZ = 2 * np.pi * 1e6


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run device-scale simulations marked slow')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: device-scale simulation (minutes); enable with --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip)


def random_density(dim: int, rng: np.random.Generator, rank: int = None) -> np.ndarray:
    rank = dim if rank is None else rank
    g = rng.normal(size=(dim, rank)) + 1j * rng.normal(size=(dim, rank))
    rho = g @ g.conj().T
    return rho / np.trace(rho).real


def random_unitary(dim: int, rng: np.random.Generator) -> np.ndarray:
    z = rng.normal(size=(dim, dim)) + 1j * rng.normal(size=(dim, dim))
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def device_config():
    return load_config()


@pytest.fixture
def gamma():
    return 6.25 * TWO_PI_MHZ


@pytest.fixture
def ideal_nodes(gamma):
    return NodeModel.ideal('A', gamma), NodeModel.ideal('B', gamma)


@pytest.fixture
def lossless_link():
    return LinkModel(0.0)


@pytest.fixture
def long_pulse_settings():
    """Wide window without ramps; tails below 1e-4 of the photon power."""
    return replace(DEFAULT_SETTINGS, halfwidth=10.0, ramp=0.0, record_dt=2e-9)


@pytest.fixture
def write_profile(tmp_path):
    """Write an INI override file and return its path."""
    def _write(text: str, name: str = 'profile.ini'):
        path = tmp_path / name
        path.write_text(text)
        return path
    return _write
