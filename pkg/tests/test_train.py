"""Tests for the training loop, checkpoints and resume"""
import numpy as np
import torch
from pytest import approx
from pytest import mark
from pytest import raises

from gridless_aoa import DEFAULT_CONFIG
from gridless_aoa.array import geometry_from_config
from gridless_aoa.baselines import IaaConfig
from gridless_aoa.baselines import IaaDetector
from gridless_aoa.evaluate import SweepGrid
from gridless_aoa.evaluate import run_sweep
from gridless_aoa.model import ModelConfig
from gridless_aoa.model import TransformerDetector
from gridless_aoa.model import forward
from gridless_aoa.model import init_weights
from gridless_aoa.simulate import SceneConfig
from gridless_aoa.simulate import make_scene
from gridless_aoa.train import *
from gridless_aoa.utils import ConfigError
from gridless_aoa.utils import NumericalError
from gridless_aoa.utils import merge_config
from gridless_aoa.utils import preset_config

TINY_MODEL = ModelConfig(
    embed_dim=8, encoder_blocks=1, decoder_blocks=1, num_queries=4, attention_heads=2
)


def tiny_config(**changes):
    values = {
        'batch_size': 4,
        'total_samples': 24,
        'learning_rate': 1e-3,
        'warmup_steps': 2,
        'eval_every': 2,
        'eval_scenes': 0,
        'scene_config': SceneConfig(n_max=2),
        'model_config': TINY_MODEL,
    }
    values.update(changes)
    return TrainConfig(**values)


@mark.parametrize(
    'kwargs',
    [
        {'batch_size': 0},
        {'total_samples': 2},
        {'learning_rate': 0.0},
        {'eval_every': 0},
        {'dtype': 'float16'},
        {'scene_config': SceneConfig(snr_db=float('inf'))},
    ],
)
def test_train_config_validation(kwargs):
    with raises(ValueError):
        tiny_config(**kwargs)


def test_train_config_from_config():
    """Test the merged config document maps onto the training settings"""
    config = TrainConfig.from_config(DEFAULT_CONFIG)
    assert config.steps == 2_000_000 // 256
    assert config.model_config.theta_min == -60.0
    assert config.loss_weights.theta_span == 120.0
    assert config.to_dict()['model']['embed_dim'] == 32
    bad = merge_config(DEFAULT_CONFIG, {'train': {'total_samples': 10}})
    with raises(ConfigError) as excinfo:
        TrainConfig.from_config(bad)
    assert 'Invalid config at "train"' in str(excinfo.value)


def test_learning_rate_schedule():
    """Test linear warmup to the peak rate followed by a cosine decay to zero"""
    config = tiny_config(total_samples=4 * 102, warmup_steps=2)
    rates = [learning_rate_at(step, config) for step in range(config.steps)]
    assert rates[0] == approx(5e-4)
    assert rates[1] == approx(1e-3)
    assert rates[2] == approx(1e-3)
    assert np.all(np.diff(rates[2:]) <= 0)
    assert rates[-1] == approx(1e-3 * 0.5 * (1 + np.cos(np.pi * 99 / 100)))


def test_desk_reproducible(capsys):
    """Test the published scale is flagged, the desk preset is not"""
    assert desk_reproducible(TrainConfig.from_config(DEFAULT_CONFIG))
    assert not desk_reproducible(TrainConfig.from_config(preset_config('paper')))
    assert 'not desk-reproducible' in capsys.readouterr().err


def test_latest_checkpoint(tmpdir):
    assert latest_checkpoint(tmpdir) is None
    for step in (20, 100, 3):
        checkpoint_path(tmpdir, step).write_bytes(b'')
    assert latest_checkpoint(tmpdir).name == 'checkpoint-0000100.aaetr'


def test_train_in_memory(ula8):
    """Test a short run logs finite losses for every step"""
    model, training_log = train(tiny_config(eval_scenes=2), ula8, progress=False)
    assert list(training_log.losses.columns) == list(LOG_COLUMNS)
    assert training_log.losses['step'].tolist() == list(range(6))
    assert np.all(np.isfinite(training_log.losses['total']))
    assert training_log.final_step == 6
    assert training_log.checkpoint is None
    # Evaluated at steps 2, 4 and 6, at N = 2 only since n_max = 2
    assert training_log.evaluations['step'].tolist() == [2, 4, 6]
    assert set(training_log.evaluations['n_targets']) == {2}
    assert model.training


def test_train_is_deterministic(ula8):
    _, first = train(tiny_config(), ula8, progress=False)
    _, second = train(tiny_config(), ula8, progress=False)
    assert first.losses['total'].tolist() == second.losses['total'].tolist()


def test_train_writes_checkpoints(tmpdir, ula8):
    _, training_log = train(tiny_config(), ula8, out_dir=tmpdir, progress=False)
    names = sorted(path.basename for path in tmpdir.listdir())
    assert names == [
        'checkpoint-0000002.aaetr',
        'checkpoint-0000004.aaetr',
        'checkpoint-0000006.aaetr',
        'eval_log.csv',
        'train_log.csv',
    ]
    assert training_log.checkpoint.name == 'checkpoint-0000006.aaetr'


def test_resume_is_bitwise_exact(tmpdir, ula8):
    """Test an interrupted and resumed run ends with the same weights"""
    config = tiny_config(eval_scenes=2)
    full, full_log = train(config, ula8, out_dir=tmpdir.mkdir('full'), progress=False)

    out_dir = tmpdir.mkdir('interrupted')
    train(config, ula8, out_dir=out_dir, progress=False)
    # Drop everything after the checkpoint at step 2
    for step in (4, 6):
        checkpoint_path(out_dir, step).unlink()
    resumed, resumed_log = train(config, ula8, out_dir=out_dir, resume=True, progress=False)

    for key, value in full.state_dict().items():
        assert torch.equal(value, resumed.state_dict()[key]), key
    assert resumed_log.losses['total'].tolist() == full_log.losses['total'].tolist()
    assert resumed_log.evaluations['step'].tolist() == [2, 4, 6]


def test_resume_without_checkpoint(tmpdir, ula8, capsys):
    _, training_log = train(tiny_config(), ula8, out_dir=tmpdir, resume=True, progress=False)
    assert training_log.final_step == 6
    assert 'starting from scratch' in capsys.readouterr().err


def test_resume_errors(tmpdir, ula8):
    with raises(ValueError):
        train(tiny_config(), ula8, resume=True, progress=False)
    train(tiny_config(), ula8, out_dir=tmpdir, progress=False)
    other = tiny_config(model_config=ModelConfig(embed_dim=8, attention_heads=2, num_queries=4))
    with raises(ValueError) as excinfo:
        train(other, ula8, out_dir=tmpdir, resume=True, progress=False)
    assert 'different model config' in str(excinfo.value)


def test_non_finite_loss(ula8, monkeypatch):
    """Test a diverging loss stops training with the step and last checkpoint"""
    monkeypatch.setattr(
        'gridless_aoa.train.batch_loss',
        lambda *args: (torch.tensor(float('nan')), {}, []),
    )
    with raises(NumericalError) as excinfo:
        train(tiny_config(), ula8, progress=False)
    assert 'step 0' in str(excinfo.value)
    assert 'last checkpoint: None' in str(excinfo.value)


def test_evaluate_checkpoint_targets(ula8):
    """Test held-out evaluation defaults to N = 2 and N = n_max"""
    reports = evaluate_checkpoint(
        init_weights(TINY_MODEL), ula8, SceneConfig(n_max=4), scenes=3, thresholds=5
    )
    assert [r.condition.n_targets for r in reports] == [2, 4]
    assert all(r.condition.snr_db == 35.0 for r in reports)
    assert all(r.condition.dynamic_range_db == 13.0 for r in reports)


def test_untrained_model_is_near_chance(ula16):
    """Test random weights score a low max F1"""
    reports = evaluate_checkpoint(
        init_weights(ModelConfig()), ula16, SceneConfig(), scenes=100, n_targets=(2,)
    )
    assert reports[0].max_f1 < 0.2


@mark.slow
def test_loss_decreases(ula16):
    """Test the median loss of the last 100 steps is below that of the first 100"""
    config = TrainConfig(
        batch_size=64,
        total_samples=64 * 1000,
        warmup_steps=100,
        eval_every=1000,
        eval_scenes=0,
    )
    _, training_log = train(config, ula16, progress=False)
    losses = training_log.losses['total']
    assert losses.iloc[900:].median() < losses.iloc[:100].median()


@mark.acceptance
def test_desk_training_run(tmpdir):
    """Test the desk preset beats IAA on the same scenes after a full run"""
    config = TrainConfig.from_config(DEFAULT_CONFIG)
    geometry = geometry_from_config(DEFAULT_CONFIG['geometry'])
    model, _ = train(config, geometry, out_dir=tmpdir, progress=False)

    scene = make_scene(
        SceneConfig(n_max=1, fixed_n=1, dynamic_range_db=0.0), geometry, 12345
    )
    detections = forward(model, geometry, scene.snapshot).sorted()
    assert abs(detections.angles[0] - scene.targets[0].angle) <= 0.5

    grid = SweepGrid(snr_db=(35.0,), n_targets=(2, 4), scenes_per_condition=500)
    ours = run_sweep(
        TransformerDetector(model, geometry),
        geometry,
        grid,
        config.scene_config,
        angle_tol_deg=1.0,
        progress=False,
    )
    iaa = run_sweep(
        IaaDetector(geometry, IaaConfig()),
        geometry,
        grid,
        config.scene_config,
        angle_tol_deg=1.0,
        progress=False,
    )
    assert ours[0].max_f1 >= 0.8
    assert ours[1].max_f1 > iaa[1].max_f1
