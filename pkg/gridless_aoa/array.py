"""Virtual array geometry and steering vectors"""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gridless_aoa import DEFAULT_WAVELENGTH
from gridless_aoa.utils import ConfigError
from gridless_aoa.utils import log

# Receive element indices, in half wavelengths, of the default sparse layout.
# Transmitters sit every 10 half wavelengths so no two virtual sums coincide.
SPARSE_RX_HALF_WAVELENGTHS = (0, 1, 2, 4, 5, 7, 8, 9)
SPARSE_TX_COUNT = 6
SPARSE_TX_PITCH_HALF_WAVELENGTHS = 10


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    """Element positions of a virtual array

    Parameters
    ----------
    positions : array_like
        K x 3 element positions in meters
    wavelength : float
        Carrier wavelength in meters
    """

    positions: np.ndarray
    wavelength: float

    def __post_init__(self):
        positions = np.array(self.positions, dtype=float)
        if positions.ndim != 2 or positions.shape[1] != 3:
            msg = f'Positions must be a K x 3 matrix, got shape {positions.shape}'
            raise ValueError(msg)
        if positions.shape[0] < 2:
            msg = f'An array needs at least 2 elements, got {positions.shape[0]}'
            raise ValueError(msg)
        if not np.all(np.isfinite(positions)):
            msg = 'Element positions must be finite'
            raise ValueError(msg)
        if not (np.isfinite(self.wavelength) and self.wavelength > 0):
            msg = f'Wavelength must be positive and finite, got {self.wavelength}'
            raise ValueError(msg)
        if len(np.unique(positions, axis=0)) != len(positions):
            msg = 'Two or more elements share the same position'
            raise ValueError(msg)
        positions.setflags(write=False)
        object.__setattr__(self, 'positions', positions)
        object.__setattr__(self, 'wavelength', float(self.wavelength))

    @property
    def element_count(self):
        return self.positions.shape[0]

    def positions_in_wavelengths(self):
        """Element positions divided by the wavelength"""
        return self.positions / self.wavelength

    def translated(self, offset):
        """Same array shifted by a constant `offset` vector in meters"""
        return ArrayGeometry(self.positions + np.asarray(offset, float), self.wavelength)

    def permuted(self, order):
        """Same array with its elements listed in `order`"""
        return ArrayGeometry(self.positions[np.asarray(order)], self.wavelength)

    def to_dict(self):
        return {
            'wavelength_m': self.wavelength,
            'positions_m': self.positions.tolist(),
        }


def uniform_linear_array(count, spacing, wavelength=DEFAULT_WAVELENGTH):
    """Uniform linear array along the y-axis

    Parameters
    ----------
    count : int
        Number of elements, at least 2
    spacing : float
        Inter-element spacing in meters
    wavelength : float
        Carrier wavelength in meters

    Returns
    -------
    ArrayGeometry
        Elements at y_k = k * spacing
    """
    if count < 2:
        msg = f'A uniform linear array needs at least 2 elements, got {count}'
        raise ValueError(msg)
    if not spacing > 0:
        msg = f'Element spacing must be positive, got {spacing}'
        raise ValueError(msg)
    positions = np.zeros((count, 3))
    positions[:, 1] = np.arange(count) * spacing
    return ArrayGeometry(positions, wavelength)


def _as_positions(values, name):
    values = np.asarray(values, dtype=float)
    # Bare coordinates are taken as positions on the y-axis
    if values.ndim == 1:
        values = np.column_stack([np.zeros_like(values), values, np.zeros_like(values)])
    if values.ndim != 2 or values.shape[1] != 3 or values.shape[0] < 1:
        msg = f'{name} positions must be a non-empty list of 3D points'
        raise ValueError(msg)
    return values


def mimo_virtual_array(tx_positions, rx_positions, wavelength=DEFAULT_WAVELENGTH):
    """Virtual array of a MIMO radar

    Every transmitter/receiver pair contributes one virtual element at the
    sum of their positions, ordered transmitter-major.

    Parameters
    ----------
    tx_positions : array_like
        T x 3 transmitter positions in meters (or T y-coordinates)
    rx_positions : array_like
        R x 3 receiver positions in meters (or R y-coordinates)
    wavelength : float
        Carrier wavelength in meters

    Returns
    -------
    ArrayGeometry
        T * R virtual elements

    Raises
    ------
    ValueError
        When two virtual elements coincide
    """
    tx = _as_positions(tx_positions, 'Transmitter')
    rx = _as_positions(rx_positions, 'Receiver')
    virtual = (tx[:, None, :] + rx[None, :, :]).reshape(-1, 3)
    if len(np.unique(virtual, axis=0)) != len(virtual):
        msg = (
            'Transmitter and receiver positions produce duplicate virtual elements, '
            'redundant virtual arrays are not supported'
        )
        raise ValueError(msg)
    return ArrayGeometry(virtual, wavelength)


def default_sparse_array(wavelength=DEFAULT_WAVELENGTH):
    """Default 48 element sparse virtual array (6 TX, 8 RX)"""
    half = wavelength / 2
    tx = [
        k * SPARSE_TX_PITCH_HALF_WAVELENGTHS * half for k in range(SPARSE_TX_COUNT)
    ]
    rx = [k * half for k in SPARSE_RX_HALF_WAVELENGTHS]
    return mimo_virtual_array(tx, rx, wavelength)


def _unit_direction(angles_deg):
    theta = np.deg2rad(angles_deg)
    return np.stack([np.cos(theta), np.sin(theta), np.zeros_like(theta)], axis=-1)


def steering_vector(geometry, angle):
    """Phase-only far-field steering vector

    Parameters
    ----------
    geometry : ArrayGeometry
        Virtual array
    angle : float
        Azimuth in degrees

    Returns
    -------
    numpy.ndarray
        K unit-modulus complex entries exp(j 2 pi/lambda <p_k, u(theta)>)
    """
    if not np.isfinite(angle):
        msg = f'Steering angle must be finite, got {angle}'
        raise ValueError(msg)
    phase = (2 * np.pi / geometry.wavelength) * (
        geometry.positions @ _unit_direction(float(angle))
    )
    return np.exp(1j * phase)


def steering_matrix(geometry, grid):
    """K x G matrix whose columns are steering vectors over `grid`

    Parameters
    ----------
    geometry : ArrayGeometry
        Virtual array
    grid : array_like
        Strictly increasing azimuths in degrees

    Returns
    -------
    numpy.ndarray
        Complex steering matrix
    """
    grid = np.atleast_1d(np.asarray(grid, dtype=float))
    if grid.ndim != 1 or grid.size == 0:
        msg = 'Steering grid must be a non-empty 1D sequence of angles'
        raise ValueError(msg)
    if not np.all(np.isfinite(grid)):
        msg = 'Steering grid angles must be finite'
        raise ValueError(msg)
    if np.any(np.diff(grid) <= 0):
        msg = 'Steering grid must be strictly increasing without duplicates'
        raise ValueError(msg)
    phase = (2 * np.pi / geometry.wavelength) * (
        geometry.positions @ _unit_direction(grid).T
    )
    return np.exp(1j * phase)


def load_geometry(path):
    """Load an array geometry from a JSON file

    The file holds `{"wavelength_m": float, "positions_m": [[x, y, z], ...]}`.

    Parameters
    ----------
    path : str | Path
        Geometry file

    Returns
    -------
    ArrayGeometry
        Validated geometry
    """
    data = json.loads(Path(path).read_text(encoding='utf-8'))
    missing = {'wavelength_m', 'positions_m'} - set(data)
    if missing:
        msg = f'Geometry file {path} is missing {", ".join(sorted(missing))}'
        raise ValueError(msg)
    return ArrayGeometry(data['positions_m'], data['wavelength_m'])


def save_geometry(geometry, path):
    """Write `geometry` in the JSON geometry file format"""
    path = Path(path)
    path.write_text(json.dumps(geometry.to_dict(), indent=2) + '\n', encoding='utf-8')
    return path


def geometry_from_config(section):
    """Build the array described by the `geometry` config section

    Parameters
    ----------
    section : dict
        Geometry config section

    Returns
    -------
    ArrayGeometry
        Virtual array

    Raises
    ------
    ConfigError
        When the section does not describe a valid array
    """
    kind = section.get('kind', 'ula')
    wavelength = section.get('wavelength_m') or DEFAULT_WAVELENGTH
    try:
        if kind == 'ula':
            spacing = section.get('spacing_m') or wavelength / 2
            geometry = uniform_linear_array(section.get('count', 16), spacing, wavelength)
        elif kind == 'mimo':
            geometry = mimo_virtual_array(
                section.get('tx_positions_m', []),
                section.get('rx_positions_m', []),
                wavelength,
            )
        elif kind == 'sparse48':
            geometry = default_sparse_array(wavelength)
        elif kind == 'file':
            if not section.get('path'):
                msg = 'geometry.path is required when geometry.kind is "file"'
                raise ConfigError(msg)
            geometry = load_geometry(section['path'])
        else:
            msg = f'Unknown geometry kind {kind!r}'
            raise ConfigError(msg)
    except (ValueError, OSError) as err:
        msg = f'Invalid config at "geometry": {err}'
        raise ConfigError(msg) from None
    log(f'Using {kind} array with {geometry.element_count} virtual elements.')
    return geometry
