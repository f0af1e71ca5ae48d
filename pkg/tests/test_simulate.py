"""Tests for scene sampling, snapshot synthesis and shards"""
import json

import numpy as np
from pytest import approx
from pytest import mark
from pytest import raises

from gridless_aoa.array import steering_vector
from gridless_aoa.simulate import *
from gridless_aoa.utils import ConfigError


def test_db_to_linear():
    assert db_to_linear(0.0) == approx(1.0)
    assert db_to_linear(-20.0) == approx(0.1)
    assert db_to_linear(6.0) == approx(1.9952623)


def test_scene_seed_is_deterministic():
    assert scene_seed('train', 0, 5) == scene_seed('train', 0, 5)
    assert 0 <= scene_seed('eval', 3) < 2**64


def test_scene_seed_namespaces_are_disjoint():
    """Test the same keys give different seeds in different namespaces"""
    seeds = {scene_seed(namespace, 0, i) for namespace in SEED_NAMESPACES for i in range(100)}
    assert len(seeds) == 300


@mark.parametrize('namespace,keys', [('test', (0,)), ('train', (-1,))])
def test_scene_seed_errors(namespace, keys):
    with raises(ValueError):
        scene_seed(namespace, *keys)


def test_scene_config_derives_alpha_min():
    config = SceneConfig(alpha_max=0.0, dynamic_range_db=13.0)
    assert config.alpha_min == -13.0


@mark.parametrize(
    'kwargs',
    [
        {'alpha_min': -10.0, 'alpha_max': 0.0, 'dynamic_range_db': 13.0},
        {'alpha_min': None, 'dynamic_range_db': None},
        {'n_max': -1},
        {'theta_min': 10.0, 'theta_max': -10.0},
        {'fixed_n': 5, 'n_max': 4},
        {'snr_db': float('nan')},
    ],
)
def test_scene_config_validation(kwargs):
    with raises(ValueError):
        SceneConfig(**kwargs)


def test_scene_config_from_dict():
    """Test an explicit magnitude window switches the dynamic range off"""
    config = SceneConfig.from_dict(
        {'alpha_min': -30.0, 'alpha_max': 10.0, 'dynamic_range_db': 13.0, 'snr_db': 'inf'}
    )
    assert config.alpha_min == -30.0
    assert config.dynamic_range_db is None
    assert np.isposinf(config.snr_db)
    assert config.to_dict()['snr_db'] == 'inf'


def test_scene_config_from_dict_errors():
    with raises(ConfigError) as excinfo:
        SceneConfig.from_dict({'n_max': 2, 'fixed_n': 3})
    assert 'Invalid config at "scene"' in str(excinfo.value)


def test_sample_scene_ranges():
    """Test target count, angles and magnitudes stay in their ranges"""
    config = SceneConfig(n_max=6, theta_min=-40.0, theta_max=20.0, dynamic_range_db=10.0)
    counts = set()
    for i in range(300):
        targets = sample_scene(config, scene_seed('dataset', 0, i))
        counts.add(len(targets))
        for target in targets:
            assert -40.0 <= target.angle <= 20.0
            assert -10.0 <= target.magnitude_db <= 0.0
            assert 0.0 <= target.phase <= 2 * np.pi
    assert counts == set(range(7))


def test_sample_scene_fixed_n():
    config = SceneConfig(n_max=4, fixed_n=3)
    assert all(len(sample_scene(config, s)) == 3 for s in range(20))


def test_make_scene_is_bit_exact(ula16):
    """Test a scene is regenerated bit-exactly from its seed"""
    config = SceneConfig()
    first = make_scene(config, ula16, 42)
    second = make_scene(config, ula16, 42)
    assert first.targets == second.targets
    assert np.array_equal(first.snapshot, second.snapshot)
    assert first.seed == 42


def test_noise_does_not_depend_on_targets(ula16):
    """Test the noise of a scene is a scaled copy of its unit noise"""
    config = SceneConfig(n_max=4, snr_db=10.0)
    scene = make_scene(config, ula16, 7)
    noise = scene.snapshot - noiseless_snapshot(scene.targets, ula16)
    assert np.allclose(noise, scene.noise_sigma * unit_noise(16, 7))


def test_noiseless_snapshot(ula16, make_targets):
    """Test a noiseless snapshot is the amplitude weighted steering sum"""
    targets = make_targets((10.0, 0.0, 0.5), (-25.0, -6.0, 1.0))
    snapshot, sigma = synthesize_snapshot(targets, ula16, float('inf'), 0)
    expected = sum(t.amplitude * steering_vector(ula16, t.angle) for t in targets)
    assert sigma == 0.0
    assert np.allclose(snapshot, expected)


def test_noise_level_follows_strongest_target(ula16, make_targets):
    targets = make_targets((0.0, -3.0), (20.0, 6.0))
    _, sigma = synthesize_snapshot(targets, ula16, 20.0, 1)
    assert sigma == approx(db_to_linear(6.0) / 10.0)


def test_empty_scene_is_noise_at_reference_level(ula16):
    """Test a scene without targets holds noise relative to alpha_max"""
    config = SceneConfig(n_max=0, alpha_max=0.0, snr_db=20.0)
    scene = make_scene(config, ula16, 3)
    assert scene.targets == ()
    assert scene.noise_sigma == approx(0.1)
    assert np.allclose(scene.snapshot, 0.1 * unit_noise(16, 3))


@mark.slow
def test_snr_calibration(ula16):
    """Test the empirical per-element SNR is within 0.5 dB of the configured one"""
    config = SceneConfig(n_max=4, fixed_n=3, snr_db=20.0)
    ratios = []
    for i in range(1000):
        scene = make_scene(config, ula16, scene_seed('dataset', 9, i))
        noise = scene.snapshot - noiseless_snapshot(scene.targets, ula16)
        strongest = db_to_linear(max(t.magnitude_db for t in scene.targets)) ** 2
        ratios.append(np.mean(np.abs(noise) ** 2) / strongest)
    assert -10 * np.log10(np.mean(ratios)) == approx(20.0, abs=0.5)


def test_scene_stream(ula8):
    """Test stream indices are independent and worker count does not matter"""
    stream = stream_scenes(SceneConfig(), ula8, start_seed=5, namespace='train')
    sequential = stream.take(0, 12)
    threaded = stream.take(0, 12, workers=4)
    assert [s.seed for s in sequential] == [s.seed for s in threaded]
    assert np.array_equal(sequential[7].snapshot, stream[7].snapshot)
    assert [s.seed for s in stream.take(4, 6)] == [stream.seed_of(4), stream.seed_of(5)]


def test_scene_stream_iterates(ula8):
    stream = SceneStream(SceneConfig(), ula8)
    first = [scene for scene, _ in zip(stream, range(3))]
    assert [s.seed for s in first] == [stream.seed_of(i) for i in range(3)]


def test_scene_stream_rejects_negative_index(ula8):
    with raises(IndexError):
        SceneStream(SceneConfig(), ula8)[-1]


def test_jsonl_shard(tmpdir, ula8):
    """Test JSON-lines shards keep every scene field"""
    scenes = SceneStream(SceneConfig(snr_db=15.0), ula8).take(0, 5)
    path = write_shard(scenes, tmpdir.join('scenes.jsonl'))
    loaded = read_shard(path)
    assert len(loaded) == 5
    for scene, copy in zip(scenes, loaded):
        assert copy.seed == scene.seed
        assert copy.targets == scene.targets
        assert np.array_equal(copy.snapshot, scene.snapshot)
        assert copy.noise_sigma == scene.noise_sigma


def test_binary_shard(tmpdir, ula8):
    """Test AOA1 shards store float32 values behind the documented header"""
    scenes = SceneStream(SceneConfig(snr_db=15.0), ula8).take(0, 4)
    path = write_shard(scenes, tmpdir.join('scenes.bin'))
    data = path.read_bytes()
    assert data[:4] == b'AOA1'
    assert int.from_bytes(data[4:8], 'little') == 8
    assert int.from_bytes(data[8:12], 'little') == 4
    loaded = read_shard(path)
    for scene, copy in zip(scenes, loaded):
        assert copy.seed == scene.seed
        assert np.allclose(copy.snapshot, scene.snapshot, rtol=1e-6, atol=1e-6)
        assert np.allclose(copy.angles, scene.angles, atol=1e-4)


def test_binary_shard_truncated(tmpdir, ula8):
    scenes = SceneStream(SceneConfig(), ula8).take(0, 3)
    path = write_shard(scenes, tmpdir.join('scenes.bin'))
    path.write_bytes(path.read_bytes()[:-10])
    with raises(ValueError) as excinfo:
        read_shard(path)
    assert 'truncated' in str(excinfo.value)


@mark.parametrize('name', ['empty.jsonl', 'empty.bin'])
def test_empty_shard(tmpdir, name):
    path = write_shard([], tmpdir.join(name))
    assert read_shard(path) == []


def test_shard_is_byte_identical(tmpdir, ula8):
    stream = SceneStream(SceneConfig(), ula8, start_seed=11)
    first = write_shard(stream.take(0, 6), tmpdir.join('a.jsonl'))
    second = write_shard(stream.take(0, 6), tmpdir.join('b.jsonl'))
    assert first.read_bytes() == second.read_bytes()


def test_jsonl_shard_noiseless(tmpdir, ula8):
    """Test infinite SNR is written as strict JSON and read back"""
    scenes = SceneStream(SceneConfig(snr_db=float('inf')), ula8).take(0, 3)
    path = write_shard(scenes, tmpdir.join('noiseless.jsonl'))

    def reject(token):
        raise ValueError(token)

    for line in path.read_text(encoding='utf-8').splitlines():
        assert json.loads(line, parse_constant=reject)['snr_db'] == 'inf'
    loaded = read_shard(path)
    assert all(scene.snr_db == float('inf') for scene in loaded)
    assert all(scene.noise_sigma == 0.0 for scene in loaded)


def test_snapshot_superposition(ula16, rng):
    """Test the noiseless snapshot of a union of targets is the sum of parts"""
    for _ in range(50):
        targets = [
            Target(a, m, p)
            for a, m, p in zip(
                rng.uniform(-60, 60, 5), rng.uniform(-20, 0, 5), rng.uniform(0, 2 * np.pi, 5)
            )
        ]
        split = int(rng.integers(0, 6))
        union = noiseless_snapshot(targets, ula16)
        parts = noiseless_snapshot(targets[:split], ula16) + noiseless_snapshot(
            targets[split:], ula16
        )
        singles = sum(noiseless_snapshot([t], ula16) for t in targets)
        assert np.allclose(union, parts, rtol=1e-12, atol=1e-12)
        assert np.allclose(union, singles, rtol=1e-12, atol=1e-12)
