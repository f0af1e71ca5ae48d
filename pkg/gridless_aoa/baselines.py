"""Grid-based baselines: matched filter, IAA and peak extraction"""
from dataclasses import asdict
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy.linalg import LinAlgError
from scipy.linalg import cho_factor
from scipy.linalg import cho_solve
from scipy.signal import find_peaks
from scipy.special import expit

from gridless_aoa.array import steering_matrix
from gridless_aoa.detections import DetectionSet
from gridless_aoa.detections import clip_confidences
from gridless_aoa.utils import ConfigError
from gridless_aoa.utils import NumericalError

# Floors used when converting linear power to dB
PEAK_FLOOR_DB = -300.0
EXPORT_FLOOR_DB = -120.0


def power_to_db(power, floor_db=EXPORT_FLOOR_DB):
    """10 log10 of linear power, floored at `floor_db`"""
    floor = 10.0 ** (floor_db / 10.0)
    return 10.0 * np.log10(np.maximum(np.asarray(power, dtype=float), floor))


@dataclass(frozen=True, eq=False)
class AngularSpectrum:
    """Linear power over a uniform angle grid

    Parameters
    ----------
    grid : array_like
        G strictly increasing, uniformly spaced angles in degrees
    power : array_like
        G non-negative linear powers
    complex_amplitude : array_like | None
        Optional G complex amplitudes the power was computed from
    """

    grid: np.ndarray
    power: np.ndarray
    complex_amplitude: np.ndarray = None

    def __post_init__(self):
        grid = np.atleast_1d(np.asarray(self.grid, dtype=float))
        power = np.atleast_1d(np.asarray(self.power, dtype=float))
        if grid.ndim != 1 or grid.shape != power.shape:
            msg = 'Spectrum grid and power must be 1D arrays of equal length'
            raise ValueError(msg)
        if len(grid) > 1:
            steps = np.diff(grid)
            if np.any(steps <= 0):
                msg = 'Spectrum grid must be strictly increasing'
                raise ValueError(msg)
            if np.max(np.abs(steps - steps.mean())) > 1e-9 * steps.mean():
                msg = 'Spectrum grid must be uniformly spaced'
                raise ValueError(msg)
        if np.any(power < 0) or not np.all(np.isfinite(power)):
            msg = 'Spectrum power must be finite and non-negative'
            raise ValueError(msg)
        object.__setattr__(self, 'grid', grid)
        object.__setattr__(self, 'power', power)
        if self.complex_amplitude is not None:
            object.__setattr__(
                self, 'complex_amplitude', np.asarray(self.complex_amplitude, complex)
            )

    @property
    def step(self):
        if len(self.grid) < 2:
            return 0.0
        return float((self.grid[-1] - self.grid[0]) / (len(self.grid) - 1))

    def power_db(self, floor_db=EXPORT_FLOOR_DB):
        return power_to_db(self.power, floor_db)

    def same_grid(self, other):
        return self.grid.shape == other.grid.shape and np.allclose(
            self.grid, other.grid, rtol=0, atol=1e-9
        )


def uniform_grid(theta_min=-60.0, theta_max=60.0, size=512):
    """`size` uniformly spaced angles from `theta_min` to `theta_max` inclusive"""
    return np.linspace(theta_min, theta_max, size)


@dataclass(frozen=True)
class IaaConfig:
    grid_size: int = 512
    iterations: int = 15
    diagonal_loading: float = 1e-6
    max_peaks: int = 16
    theta_min: float = -60.0
    theta_max: float = 60.0

    def __post_init__(self):
        if self.iterations < 1:
            msg = f'IAA needs at least one iteration, got {self.iterations}'
            raise ValueError(msg)
        if self.grid_size < 1:
            msg = f'grid_size must be positive, got {self.grid_size}'
            raise ValueError(msg)
        if self.diagonal_loading < 0:
            msg = 'diagonal_loading must be non-negative'
            raise ValueError(msg)
        if self.max_peaks < 1:
            msg = 'max_peaks must be at least 1'
            raise ValueError(msg)

    def grid(self):
        return uniform_grid(self.theta_min, self.theta_max, self.grid_size)

    @classmethod
    def from_dict(cls, section, theta_min=-60.0, theta_max=60.0):
        """Build from the `iaa` config section over the scene field of view"""
        keys = ('grid_size', 'iterations', 'diagonal_loading', 'max_peaks')
        try:
            return cls(
                theta_min=theta_min,
                theta_max=theta_max,
                **{k: section[k] for k in keys if k in section},
            )
        except ValueError as err:
            msg = f'Invalid config at "iaa": {err}'
            raise ConfigError(msg) from None


@dataclass(frozen=True)
class ConfidenceMap:
    """Affine-logistic map from peak magnitude in dB to a confidence

    confidence = expit((magnitude_db - center_db) / scale_db)
    """

    center_db: float = -20.0
    scale_db: float = 5.0

    def __call__(self, magnitude_db):
        values = expit((np.asarray(magnitude_db, float) - self.center_db) / self.scale_db)
        return clip_confidences(values)

    @classmethod
    def from_dict(cls, section):
        return cls(
            center_db=section.get('confidence_center_db', cls.center_db),
            scale_db=section.get('confidence_scale_db', cls.scale_db),
        )


def _check_dimensions(snapshot, steering, grid):
    snapshot = np.asarray(snapshot, dtype=complex)
    steering = np.asarray(steering, dtype=complex)
    grid = np.asarray(grid, dtype=float)
    if snapshot.ndim != 1 or steering.ndim != 2:
        msg = 'Expected a 1D snapshot and a 2D steering matrix'
        raise ValueError(msg)
    if steering.shape[0] != snapshot.shape[0]:
        msg = (
            f'Snapshot has {snapshot.shape[0]} elements but the steering matrix '
            f'has {steering.shape[0]} rows'
        )
        raise ValueError(msg)
    if grid.shape != (steering.shape[1],):
        msg = f'Grid of {grid.size} angles does not match {steering.shape[1]} columns'
        raise ValueError(msg)
    return snapshot, steering, grid


def matched_filter(snapshot, steering, grid):
    """Normalized matched-filter (Bartlett) spectrum

    Parameters
    ----------
    snapshot : array_like
        K complex samples
    steering : numpy.ndarray
        K x G steering matrix
    grid : array_like
        G angles the steering columns point to

    Returns
    -------
    AngularSpectrum
        Amplitudes a_g^H y / a_g^H a_g and their squared magnitudes
    """
    snapshot, steering, grid = _check_dimensions(snapshot, steering, grid)
    norms = np.sum(np.abs(steering) ** 2, axis=0)
    amplitude = (steering.conj().T @ snapshot) / norms
    return AngularSpectrum(grid, np.abs(amplitude) ** 2, amplitude)


def model_covariance(steering, power, diagonal_loading):
    """Hermitian model covariance A diag(p) A^H with relative diagonal loading

    Parameters
    ----------
    steering : numpy.ndarray
        K x G steering matrix
    power : numpy.ndarray
        G non-negative powers
    diagonal_loading : float
        Loading relative to trace(R) / K

    Returns
    -------
    numpy.ndarray
        K x K Hermitian matrix
    """
    elements = steering.shape[0]
    covariance = (steering * power) @ steering.conj().T
    load = diagonal_loading * np.real(np.trace(covariance)) / elements
    covariance = covariance + load * np.eye(elements)
    return 0.5 * (covariance + covariance.conj().T)


def iaa_spectrum(snapshot, steering, grid, config=None):
    """Single-snapshot Iterative Adaptive Approach spectrum

    Starting from the matched-filter powers, every iteration rebuilds the
    model covariance and re-estimates each grid amplitude as
    s_g = a_g^H R^-1 y / a_g^H R^-1 a_g. One Cholesky factorization of R is
    shared by all grid points of an iteration.

    Parameters
    ----------
    snapshot : array_like
        K complex samples
    steering : numpy.ndarray
        K x G steering matrix
    grid : array_like
        G angles the steering columns point to
    config : IaaConfig | None
        Iteration count and diagonal loading

    Returns
    -------
    AngularSpectrum
        Final powers and amplitudes

    Raises
    ------
    NumericalError
        When the model covariance cannot be factorized
    """
    config = config or IaaConfig()
    snapshot, steering, grid = _check_dimensions(snapshot, steering, grid)
    initial = matched_filter(snapshot, steering, grid)
    power, amplitude = initial.power, initial.complex_amplitude

    for iteration in range(config.iterations):
        # A zero snapshot has a zero spectrum, nothing to refine
        if not np.any(power > 0):
            break
        covariance = model_covariance(steering, power, config.diagonal_loading)
        try:
            factor = cho_factor(covariance, lower=True)
        except LinAlgError:
            if config.diagonal_loading == 0:
                msg = (
                    f'IAA covariance is singular at iteration {iteration + 1}, '
                    'set a nonzero iaa.diagonal_loading'
                )
            else:
                msg = (
                    f'IAA covariance is singular at iteration {iteration + 1} even '
                    f'with diagonal_loading = {config.diagonal_loading}, increase it'
                )
            raise NumericalError(msg) from None
        solved = cho_solve(factor, np.column_stack([snapshot, steering]))
        numerator = steering.conj().T @ solved[:, 0]
        denominator = np.real(np.sum(steering.conj() * solved[:, 1:], axis=0))
        amplitude = numerator / denominator
        power = np.abs(amplitude) ** 2
        if not np.all(np.isfinite(power)):
            msg = f'IAA produced non-finite powers at iteration {iteration + 1}'
            raise NumericalError(msg)

    return AngularSpectrum(grid, power, amplitude)


def extract_peaks(spectrum, max_peaks, confidence=None):
    """Turn a grid spectrum into gridless detections

    Interior local maxima (plateaus counted once, at their leftmost cell) are
    ranked by power, the `max_peaks` strongest kept and refined with a
    three-point parabola in dB. Confidences come from `confidence`.

    Parameters
    ----------
    spectrum : AngularSpectrum
        Spectrum with at least 3 cells
    max_peaks : int
        Maximum number of detections
    confidence : ConfidenceMap | None
        Map from refined peak magnitude in dB to confidence

    Returns
    -------
    DetectionSet
        Detections sorted by descending confidence
    """
    if len(spectrum.grid) < 3:
        msg = f'Peak extraction needs at least 3 spectrum cells, got {len(spectrum.grid)}'
        raise ValueError(msg)
    if max_peaks < 1:
        msg = f'max_peaks must be at least 1, got {max_peaks}'
        raise ValueError(msg)
    confidence = confidence or ConfidenceMap()

    db = spectrum.power_db(PEAK_FLOOR_DB)
    _, properties = find_peaks(db, plateau_size=1)
    cells = properties['left_edges']
    if cells.size == 0:
        return DetectionSet.empty()
    cells = cells[np.argsort(-db[cells], kind='stable')[:max_peaks]]

    left, centre, right = db[cells - 1], db[cells], db[cells + 1]
    curvature = left - 2 * centre + right
    offset = np.zeros_like(centre)
    np.divide(0.5 * (left - right), curvature, out=offset, where=curvature < 0)
    offset = np.clip(offset, -0.5, 0.5)

    angles = spectrum.grid[cells] + offset * spectrum.step
    magnitudes = centre - 0.25 * (left - right) * offset
    return DetectionSet(angles, magnitudes, confidence(magnitudes)).sorted()


class SpectrumDetector:
    """Scene to detections through a grid spectrum and peak extraction"""

    name = None

    def __init__(self, geometry, config=None, confidence=None) -> None:
        self.geometry = geometry
        self.config = config or IaaConfig()
        self.confidence = confidence or ConfidenceMap()
        self.grid = self.config.grid()
        self.steering = steering_matrix(geometry, self.grid)

    def spectrum(self, snapshot):
        raise NotImplementedError

    def __call__(self, scene):
        return extract_peaks(
            self.spectrum(scene.snapshot), self.config.max_peaks, self.confidence
        )

    def describe(self):
        return {
            'method': self.name,
            'config': asdict(self.config),
            'confidence_map': asdict(self.confidence),
        }


class MatchedFilterDetector(SpectrumDetector):
    name = 'mf'

    def spectrum(self, snapshot):
        return matched_filter(snapshot, self.steering, self.grid)


class IaaDetector(SpectrumDetector):
    name = 'iaa'

    def spectrum(self, snapshot):
        return iaa_spectrum(snapshot, self.steering, self.grid, self.config)


def spectrum_frame(spectrum):
    """Spectrum as a DataFrame with columns angle_deg and power_db"""
    return pd.DataFrame({'angle_deg': spectrum.grid, 'power_db': spectrum.power_db()})


def write_spectrum_csv(spectrum, path=None):
    """Export `spectrum` as CSV, returns the text when `path` is None"""
    return spectrum_frame(spectrum).to_csv(path, index=False, float_format='%.6f')
