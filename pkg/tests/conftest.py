"""Config for pytest"""
import os
from pathlib import Path

import numpy as np
import pytest

from gridless_aoa.array import uniform_linear_array
from gridless_aoa.simulate import Target

# Set an environment variable for tests
os.environ['PYTEST'] = '1'

ACCEPTANCE_ENV = 'GRIDLESS_AOA_ACCEPTANCE'
CONFIG_DIR = Path(__file__).resolve().parent.joinpath('resources', 'config')


def pytest_runtest_setup(item):
    for marker in item.iter_markers():
        if marker.name == 'acceptance' and not acceptance_enabled():  # no cov
            pytest.skip(f'Set {ACCEPTANCE_ENV}=1 to run acceptance runs')


def acceptance_enabled():
    return os.environ.get(ACCEPTANCE_ENV) == '1'


@pytest.fixture
def ula16():
    """16 element half-wavelength ULA at unit wavelength"""
    return uniform_linear_array(16, 0.5, wavelength=1.0)


@pytest.fixture
def ula8():
    return uniform_linear_array(8, 0.5, wavelength=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def make_targets():
    """Build targets from (angle, magnitude_db[, phase]) tuples"""

    def _make(*specs):
        targets = []
        for angle, magnitude_db, *phase in specs:
            phase = float(phase[0]) if phase else 0.0
            targets.append(Target(float(angle), float(magnitude_db), phase))
        return targets

    return _make


@pytest.fixture
def config_dir():
    return CONFIG_DIR
