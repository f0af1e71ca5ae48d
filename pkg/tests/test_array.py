"""Tests for array geometry and steering vectors"""
import json

import numpy as np
from pytest import mark
from pytest import raises

from gridless_aoa import DEFAULT_WAVELENGTH
from gridless_aoa.array import *
from gridless_aoa.utils import ConfigError


def test_ula_positions():
    """Test ULA elements sit on the y-axis at multiples of the spacing"""
    geometry = uniform_linear_array(4, 0.5, wavelength=1.0)
    assert geometry.element_count == 4
    assert np.allclose(geometry.positions[:, 1], [0, 0.5, 1.0, 1.5])
    assert np.allclose(geometry.positions[:, [0, 2]], 0)


@mark.parametrize(
    'positions,wavelength',
    [
        ([[0, 0, 0]], 1.0),
        ([[0, 0, 0], [0, 0, 0]], 1.0),
        ([[0, 0], [0, 1]], 1.0),
        ([[0, 0, 0], [0, np.nan, 0]], 1.0),
        ([[0, 0, 0], [0, 1, 0]], 0.0),
    ],
)
def test_geometry_validation(positions, wavelength):
    """Test invalid geometries are rejected"""
    with raises(ValueError):
        ArrayGeometry(positions, wavelength)


def test_geometry_is_read_only(ula8):
    """Test positions of a geometry cannot be modified in place"""
    with raises(ValueError):
        ula8.positions[0, 0] = 1.0


def test_steering_vector_broadside(ula16):
    """Test the broadside steering vector is all ones"""
    assert np.allclose(steering_vector(ula16, 0.0), np.ones(16))


def test_steering_vector_30_degrees(ula16):
    """Test phases of a half-wavelength ULA at 30 deg step by pi/2"""
    vector = steering_vector(ula16, 30.0)
    assert np.allclose(np.abs(vector), 1.0)
    assert np.allclose(vector, np.exp(1j * np.pi / 2 * np.arange(16)))


def test_steering_vector_rejects_nan(ula8):
    with raises(ValueError):
        steering_vector(ula8, np.nan)


def test_steering_matrix_columns(ula8):
    """Test columns of the steering matrix are the steering vectors"""
    grid = np.linspace(-60, 60, 7)
    matrix = steering_matrix(ula8, grid)
    assert matrix.shape == (8, 7)
    for column, angle in enumerate(grid):
        assert np.allclose(matrix[:, column], steering_vector(ula8, angle))


@mark.parametrize('grid', [[], [0.0, 0.0], [1.0, 0.0], [0.0, np.inf]])
def test_steering_matrix_grid_validation(ula8, grid):
    with raises(ValueError):
        steering_matrix(ula8, grid)


def test_translation_changes_only_common_phase(ula8, rng):
    """Test translating an array multiplies the steering vector by one phasor"""
    moved = ula8.translated([0.3, 1.7, 0.0])
    for angle in rng.uniform(-60, 60, 20):
        ratio = steering_vector(moved, angle) / steering_vector(ula8, angle)
        assert np.allclose(ratio, ratio[0])
        assert np.isclose(abs(ratio[0]), 1.0)


def test_permutation_permutes_steering_vector(ula8, rng):
    order = rng.permutation(8)
    permuted = ula8.permuted(order)
    assert np.allclose(steering_vector(permuted, 17.0), steering_vector(ula8, 17.0)[order])


def test_mimo_virtual_array():
    """Test virtual elements are the pairwise sums, transmitter major"""
    geometry = mimo_virtual_array([0.0, 2.0], [0.0, 0.5, 1.0], wavelength=1.0)
    assert geometry.element_count == 6
    assert np.allclose(geometry.positions[:, 1], [0, 0.5, 1.0, 2.0, 2.5, 3.0])


def test_mimo_virtual_array_matches_ula():
    """Test 2 TX spaced 4 x d/2 with 4 RX at d/2 give an 8 element ULA"""
    mimo = mimo_virtual_array([0.0, 2.0], [0.0, 0.5, 1.0, 1.5], wavelength=1.0)
    ula = uniform_linear_array(8, 0.5, wavelength=1.0)
    assert np.allclose(mimo.positions, ula.positions)


def test_mimo_virtual_array_duplicates():
    """Test coinciding virtual elements are reported"""
    with raises(ValueError):
        mimo_virtual_array([0.0, 0.5], [0.0, 0.5], wavelength=1.0)


def test_default_sparse_array():
    """Test the sparse default layout has 48 distinct elements with holes"""
    geometry = default_sparse_array(wavelength=1.0)
    y = np.sort(geometry.positions[:, 1])
    assert geometry.element_count == 48
    assert len(np.unique(y)) == 48
    assert np.isclose(y[-1] - y[0], 29.5)
    # Not a filled half-wavelength lattice
    assert len(y) < (y[-1] - y[0]) / 0.5 + 1


def test_geometry_file_round_trip(tmpdir):
    """Test geometries survive the JSON geometry file"""
    geometry = default_sparse_array()
    path = save_geometry(geometry, tmpdir.join('array.json'))
    data = json.loads(path.read_text())
    assert set(data) == {'wavelength_m', 'positions_m'}
    loaded = load_geometry(path)
    assert np.array_equal(loaded.positions, geometry.positions)
    assert loaded.wavelength == geometry.wavelength


def test_load_geometry_missing_keys(tmpdir):
    path = tmpdir.join('array.json')
    path.write('{"positions_m": [[0, 0, 0], [0, 1, 0]]}')
    with raises(ValueError) as excinfo:
        load_geometry(path)
    assert 'wavelength_m' in str(excinfo.value)


@mark.parametrize(
    'section,count',
    [
        ({'kind': 'ula', 'count': 12}, 12),
        ({'kind': 'sparse48'}, 48),
        ({'kind': 'mimo', 'tx_positions_m': [0.0, 0.008], 'rx_positions_m': [0.0, 0.002]}, 4),
    ],
)
def test_geometry_from_config(section, count):
    geometry = geometry_from_config(section)
    assert geometry.element_count == count
    assert geometry.wavelength == DEFAULT_WAVELENGTH


def test_geometry_from_config_default_spacing():
    """Test the default ULA spacing is half a wavelength"""
    geometry = geometry_from_config({'kind': 'ula', 'count': 4, 'wavelength_m': 0.004})
    assert np.allclose(np.diff(geometry.positions[:, 1]), 0.002)


def test_geometry_from_config_file(tmpdir):
    path = save_geometry(uniform_linear_array(5, 0.5, 1.0), tmpdir.join('g.json'))
    geometry = geometry_from_config({'kind': 'file', 'path': str(path)})
    assert geometry.element_count == 5


@mark.parametrize(
    'section',
    [
        {'kind': 'file'},
        {'kind': 'file', 'path': 'does-not-exist.json'},
        {'kind': 'ula', 'count': 1},
        {'kind': 'mimo', 'tx_positions_m': [], 'rx_positions_m': [0.0]},
    ],
)
def test_geometry_from_config_errors(section):
    """Test bad geometry sections raise config errors"""
    with raises(ConfigError) as excinfo:
        geometry_from_config(section)
    assert 'geometry' in str(excinfo.value)
