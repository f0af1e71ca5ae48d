"""Seeded scene generation and single-snapshot synthesis"""
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gridless_aoa import SHARD_MAGIC
from gridless_aoa.array import steering_vector
from gridless_aoa.utils import ConfigError
from gridless_aoa.utils import parallel_map

# Seed namespaces. Scene seeds are derived from SeedSequence([id, *keys]) so
# streams of different namespaces never share random state.
SEED_NAMESPACES = {'train': 0, 'eval': 1, 'dataset': 2}

_HEADER = np.dtype([('magic', 'S4'), ('elements', '<u4'), ('count', '<u4')])
_RECORD = np.dtype(
    [('seed', '<u8'), ('snr_db', '<f4'), ('noise_sigma', '<f4'), ('targets', '<u4')]
)


def db_to_linear(magnitude_db):
    """Linear amplitude of a magnitude in dB (20 log10 convention)"""
    return 10.0 ** (np.asarray(magnitude_db, dtype=float) / 20.0)


@dataclass(frozen=True)
class Target:
    angle: float
    magnitude_db: float
    phase: float

    @property
    def amplitude(self):
        """Complex amplitude lin(alpha) * exp(j phase)"""
        return float(db_to_linear(self.magnitude_db)) * np.exp(1j * self.phase)

    def to_record(self):
        return {
            'angle_deg': float(self.angle),
            'mag_db': float(self.magnitude_db),
            'phase_rad': float(self.phase),
        }

    @classmethod
    def from_record(cls, record):
        return cls(record['angle_deg'], record['mag_db'], record['phase_rad'])


@dataclass(frozen=True, eq=False)
class Scene:
    targets: tuple
    snapshot: np.ndarray
    noise_sigma: float
    snr_db: float
    seed: int

    @property
    def angles(self):
        return np.array([t.angle for t in self.targets], dtype=float)

    @property
    def magnitudes(self):
        return np.array([t.magnitude_db for t in self.targets], dtype=float)

    def to_record(self):
        return {
            'seed': int(self.seed),
            'snr_db': float(self.snr_db) if np.isfinite(self.snr_db) else 'inf',
            'noise_sigma': float(self.noise_sigma),
            'targets': [t.to_record() for t in self.targets],
            'snapshot': np.column_stack([self.snapshot.real, self.snapshot.imag]).tolist(),
        }

    @classmethod
    def from_record(cls, record):
        snapshot = np.asarray(record['snapshot'], dtype=float).reshape(-1, 2)
        return cls(
            targets=tuple(Target.from_record(t) for t in record['targets']),
            snapshot=snapshot[:, 0] + 1j * snapshot[:, 1],
            noise_sigma=float(record.get('noise_sigma', 0.0)),
            snr_db=float(record['snr_db']),
            seed=int(record['seed']),
        )


@dataclass(frozen=True)
class SceneConfig:
    """Distribution scenes are drawn from

    When `dynamic_range_db` is set and `alpha_min` is not, `alpha_min` is
    derived as `alpha_max - dynamic_range_db`.
    """

    n_max: int = 4
    theta_min: float = -60.0
    theta_max: float = 60.0
    alpha_min: float = None
    alpha_max: float = 0.0
    dynamic_range_db: float = 13.0
    snr_db: float = 35.0
    fixed_n: int = None

    def __post_init__(self):
        if self.alpha_min is None:
            if self.dynamic_range_db is None:
                msg = 'Either alpha_min or dynamic_range_db must be set'
                raise ValueError(msg)
            object.__setattr__(self, 'alpha_min', self.alpha_max - self.dynamic_range_db)
        elif self.dynamic_range_db is not None and not np.isclose(
            self.alpha_max - self.alpha_min, self.dynamic_range_db, rtol=0, atol=1e-9
        ):
            msg = (
                f'alpha_max - alpha_min = {self.alpha_max - self.alpha_min} dB does not '
                f'match dynamic_range_db = {self.dynamic_range_db} dB'
            )
            raise ValueError(msg)
        object.__setattr__(self, 'snr_db', float(self.snr_db))
        if self.n_max < 0:
            msg = f'n_max must be non-negative, got {self.n_max}'
            raise ValueError(msg)
        if not self.theta_min < self.theta_max:
            msg = 'theta_min must be smaller than theta_max'
            raise ValueError(msg)
        if self.alpha_min > self.alpha_max:
            msg = 'alpha_min must not exceed alpha_max'
            raise ValueError(msg)
        if self.fixed_n is not None and not 0 <= self.fixed_n <= self.n_max:
            msg = f'fixed_n = {self.fixed_n} must lie in [0, n_max = {self.n_max}]'
            raise ValueError(msg)
        if np.isnan(self.snr_db):
            msg = 'snr_db must be a number or inf'
            raise ValueError(msg)

    @classmethod
    def from_dict(cls, section):
        """Build from the `scene` config section"""
        values = {k: v for k, v in section.items() if v is not None}
        # An explicit magnitude window switches the dynamic-range mode off
        if 'alpha_min' in values:
            values['dynamic_range_db'] = None
        if isinstance(values.get('snr_db'), str):
            values['snr_db'] = float(values['snr_db'])
        try:
            return cls(**values)
        except (TypeError, ValueError) as err:
            msg = f'Invalid config at "scene": {err}'
            raise ConfigError(msg) from None

    def to_dict(self):
        return {
            'n_max': self.n_max,
            'theta_min': self.theta_min,
            'theta_max': self.theta_max,
            'alpha_min': self.alpha_min,
            'alpha_max': self.alpha_max,
            'dynamic_range_db': self.dynamic_range_db,
            'snr_db': self.snr_db if np.isfinite(self.snr_db) else 'inf',
            'fixed_n': self.fixed_n,
        }

    def for_condition(self, snr_db, n_targets, dynamic_range_db):
        """Evaluation config with exactly `n_targets` targets"""
        return SceneConfig(
            n_max=max(self.n_max, n_targets),
            theta_min=self.theta_min,
            theta_max=self.theta_max,
            alpha_min=self.alpha_max - dynamic_range_db,
            alpha_max=self.alpha_max,
            dynamic_range_db=dynamic_range_db,
            snr_db=snr_db,
            fixed_n=n_targets,
        )


def scene_seed(namespace, *keys):
    """Derive a 64-bit scene seed from a namespace and non-negative integer keys"""
    if namespace not in SEED_NAMESPACES:
        msg = f'Unknown seed namespace {namespace!r}'
        raise ValueError(msg)
    keys = [int(k) for k in keys]
    if any(k < 0 for k in keys):
        msg = 'Seed keys must be non-negative integers'
        raise ValueError(msg)
    words = np.random.SeedSequence([SEED_NAMESPACES[namespace], *keys]).generate_state(
        2, dtype=np.uint32
    )
    return (int(words[0]) << 32) | int(words[1])


def _child_generators(seed):
    targets, noise = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.default_rng(targets), np.random.default_rng(noise)


def sample_scene(config, rng_seed):
    """Draw the targets of one scene

    Parameters
    ----------
    config : SceneConfig
        Scene distribution
    rng_seed : int
        Scene seed

    Returns
    -------
    list of Target
        N targets, N uniform in {0..n_max} unless `fixed_n` is set
    """
    rng, _ = _child_generators(rng_seed)
    if config.fixed_n is None:
        count = int(rng.integers(0, config.n_max + 1))
    else:
        count = config.fixed_n
    angles = rng.uniform(config.theta_min, config.theta_max, count)
    magnitudes = rng.uniform(config.alpha_min, config.alpha_max, count)
    phases = rng.uniform(0.0, 2 * np.pi, count)
    return [
        Target(float(a), float(m), float(p))
        for a, m, p in zip(angles, magnitudes, phases)
    ]


def unit_noise(count, rng_seed):
    """Circular complex Gaussian noise with unit variance per element"""
    _, rng = _child_generators(rng_seed)
    draws = rng.standard_normal((2, count))
    return (draws[0] + 1j * draws[1]) / np.sqrt(2.0)


def noiseless_snapshot(targets, geometry):
    """Sum of the target returns without noise"""
    snapshot = np.zeros(geometry.element_count, dtype=complex)
    for target in targets:
        snapshot = snapshot + target.amplitude * steering_vector(geometry, target.angle)
    return snapshot


def synthesize_snapshot(targets, geometry, snr_db, rng_seed, reference_db=0.0):
    """Synthesize the snapshot seen by `geometry`

    Parameters
    ----------
    targets : list of Target
        Scene targets
    geometry : ArrayGeometry
        Virtual array
    snr_db : float
        Per-element SNR of the strongest target, `inf` disables noise
    rng_seed : int
        Scene seed, the noise is drawn from its own child stream
    reference_db : float
        Magnitude the noise level refers to when there are no targets

    Returns
    -------
    tuple
        Snapshot of K complex values and the noise standard deviation
    """
    strongest = max((t.magnitude_db for t in targets), default=reference_db)
    snapshot = noiseless_snapshot(targets, geometry)
    if np.isposinf(snr_db):
        return snapshot, 0.0
    sigma = float(db_to_linear(strongest) / 10.0 ** (snr_db / 20.0))
    return snapshot + sigma * unit_noise(geometry.element_count, rng_seed), sigma


def make_scene(config, geometry, seed):
    """Scene drawn from `config` with `seed`"""
    targets = sample_scene(config, seed)
    snapshot, sigma = synthesize_snapshot(
        targets, geometry, config.snr_db, seed, reference_db=config.alpha_max
    )
    return Scene(tuple(targets), snapshot, sigma, config.snr_db, int(seed))


class SceneStream:
    """Unbounded, indexable and deterministic stream of scenes

    Scene `i` only depends on the config, the geometry, the namespace, the
    start seed and `i`, so index ranges can be produced independently.
    """

    def __init__(self, config, geometry, start_seed=0, namespace='dataset') -> None:
        if namespace not in SEED_NAMESPACES:
            msg = f'Unknown seed namespace {namespace!r}'
            raise ValueError(msg)
        self.config = config
        self.geometry = geometry
        self.start_seed = int(start_seed)
        self.namespace = namespace

    def seed_of(self, index):
        return scene_seed(self.namespace, self.start_seed, index)

    def __getitem__(self, index):
        if index < 0:
            msg = 'Scene streams are unbounded and only accept non-negative indices'
            raise IndexError(msg)
        return make_scene(self.config, self.geometry, self.seed_of(index))

    def __iter__(self):
        return (self[i] for i in itertools.count())

    def take(self, start, stop, workers=1):
        """Scenes `start..stop-1`, generated on `workers` threads in index order"""
        return parallel_map(self.__getitem__, range(start, stop), workers)


def stream_scenes(config, geometry, start_seed=0, namespace='dataset'):
    """Deterministic scene stream, see `SceneStream`"""
    return SceneStream(config, geometry, start_seed, namespace)


def write_shard(scenes, path, binary=None):
    """Write scenes as a JSON-lines shard, or an AOA1 binary shard

    The binary layout is little-endian: a header of magic `AOA1`, uint32 K
    and uint32 count, then per scene uint64 seed, float32 snr_db, float32
    noise_sigma, uint32 N, N x (angle, magnitude, phase) float32 and K x (re,
    im) float32.

    Parameters
    ----------
    scenes : list of Scene
        Scenes to write
    path : str | Path
        Shard file
    binary : bool | None
        Binary format, by default chosen by a `.bin` suffix

    Returns
    -------
    Path
        Shard path
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if binary is None:
        binary = path.suffix == '.bin'
    scenes = list(scenes)
    if not binary:
        lines = [
            json.dumps(scene.to_record(), allow_nan=False) + '\n' for scene in scenes
        ]
        path.write_text(''.join(lines), encoding='utf-8')
        return path

    elements = len(scenes[0].snapshot) if scenes else 0
    chunks = [
        np.array([(SHARD_MAGIC, elements, len(scenes))], dtype=_HEADER).tobytes()
    ]
    for scene in scenes:
        if len(scene.snapshot) != elements:
            msg = 'All scenes of a binary shard must have the same element count'
            raise ValueError(msg)
        record = (scene.seed, scene.snr_db, scene.noise_sigma, len(scene.targets))
        chunks.append(np.array([record], dtype=_RECORD).tobytes())
        targets = [[t.angle, t.magnitude_db, t.phase] for t in scene.targets]
        chunks.append(np.asarray(targets, dtype='<f4').reshape(-1, 3).tobytes())
        snapshot = np.column_stack([scene.snapshot.real, scene.snapshot.imag])
        chunks.append(snapshot.astype('<f4').tobytes())
    path.write_bytes(b''.join(chunks))
    return path


def read_shard(path):
    """Read scenes back from a JSON-lines or AOA1 binary shard"""
    path = Path(path)
    data = path.read_bytes()
    if not data.startswith(SHARD_MAGIC):
        return [
            Scene.from_record(json.loads(line))
            for line in data.decode('utf-8').splitlines()
            if line.strip()
        ]

    header = np.frombuffer(data, dtype=_HEADER, count=1)[0]
    elements, count = int(header['elements']), int(header['count'])
    offset = _HEADER.itemsize
    scenes = []
    try:
        for _ in range(count):
            record = np.frombuffer(data, dtype=_RECORD, count=1, offset=offset)[0]
            offset += _RECORD.itemsize
            n = int(record['targets'])
            targets = np.frombuffer(data, dtype='<f4', count=3 * n, offset=offset)
            offset += targets.nbytes
            values = np.frombuffer(data, dtype='<f4', count=2 * elements, offset=offset)
            offset += values.nbytes
            targets = targets.astype(float).reshape(n, 3)
            values = values.astype(float).reshape(elements, 2)
            scenes.append(
                Scene(
                    targets=tuple(Target(*row) for row in targets.tolist()),
                    snapshot=values[:, 0] + 1j * values[:, 1],
                    noise_sigma=float(record['noise_sigma']),
                    snr_db=float(record['snr_db']),
                    seed=int(record['seed']),
                )
            )
    except ValueError:
        msg = f'Binary shard {path} is truncated'
        raise ValueError(msg) from None
    return scenes
