"""Training loop over the on-the-fly scene stream, checkpointing and resume"""
import math
from dataclasses import dataclass
from dataclasses import field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from tqdm.auto import tqdm

from gridless_aoa.evaluate import SweepGrid
from gridless_aoa.evaluate import run_sweep
from gridless_aoa.matching import LOSS_COMPONENTS
from gridless_aoa.matching import LossWeights
from gridless_aoa.matching import batch_loss
from gridless_aoa.model import AngleTransformer
from gridless_aoa.model import ModelConfig
from gridless_aoa.model import TransformerDetector
from gridless_aoa.model import element_positions
from gridless_aoa.model import init_weights
from gridless_aoa.model import load_checkpoint
from gridless_aoa.model import parameter_count
from gridless_aoa.model import save_checkpoint
from gridless_aoa.model import snapshot_features
from gridless_aoa.simulate import SceneConfig
from gridless_aoa.simulate import SceneStream
from gridless_aoa.utils import ConfigError
from gridless_aoa.utils import NumericalError
from gridless_aoa.utils import log

LOG_COLUMNS = ('step', 'total', *LOSS_COMPONENTS)
EVAL_COLUMNS = (
    'step',
    'snr_db',
    'n_targets',
    'dynamic_range_db',
    'max_f1',
    'mean_angle_l1_deg',
    'mean_mag_l1_db',
)
DTYPES = {'float32': torch.float32, 'float64': torch.float64}

# Beyond any of these a run is not practical on one machine
DESK_MAX_BATCH = 8192
DESK_MAX_SAMPLES = 10_000_000
DESK_MAX_PARAMETERS = 1_000_000


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 256
    total_samples: int = 2_000_000
    learning_rate: float = 5e-4
    warmup_steps: int = 200
    grad_clip_norm: float = 1.0
    weight_decay: float = 1e-4
    eval_every: int = 500
    eval_scenes: int = 200
    seed: int = 0
    dtype: str = 'float32'
    scene_config: SceneConfig = field(default_factory=SceneConfig)
    model_config: ModelConfig = field(default_factory=ModelConfig)
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.batch_size < 1:
            msg = f'batch_size must be positive, got {self.batch_size}'
            raise ValueError(msg)
        if self.total_samples < self.batch_size:
            msg = (
                f'total_samples = {self.total_samples} is smaller than '
                f'batch_size = {self.batch_size}'
            )
            raise ValueError(msg)
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0:
            msg = 'learning_rate and grad_clip_norm must be positive'
            raise ValueError(msg)
        if self.warmup_steps < 0 or self.weight_decay < 0 or self.eval_scenes < 0:
            msg = 'warmup_steps, weight_decay and eval_scenes must be non-negative'
            raise ValueError(msg)
        if self.eval_every < 1:
            msg = f'eval_every must be positive, got {self.eval_every}'
            raise ValueError(msg)
        if self.dtype not in DTYPES:
            msg = f'dtype must be one of {sorted(DTYPES)}, got {self.dtype!r}'
            raise ValueError(msg)
        if not np.isfinite(self.scene_config.snr_db):
            msg = 'Training needs a finite scene SNR'
            raise ValueError(msg)

    @property
    def steps(self):
        return self.total_samples // self.batch_size

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    def to_dict(self):
        return {
            'batch_size': self.batch_size,
            'total_samples': self.total_samples,
            'learning_rate': self.learning_rate,
            'warmup_steps': self.warmup_steps,
            'grad_clip_norm': self.grad_clip_norm,
            'weight_decay': self.weight_decay,
            'eval_every': self.eval_every,
            'eval_scenes': self.eval_scenes,
            'seed': self.seed,
            'dtype': self.dtype,
            'scene': self.scene_config.to_dict(),
            'model': self.model_config.to_dict(),
            'loss': {
                'w_theta': self.loss_weights.w_theta,
                'w_alpha': self.loss_weights.w_alpha,
                'w_noobj': self.loss_weights.w_noobj,
            },
        }

    @classmethod
    def from_config(cls, config):
        """Build from the merged config document"""
        scene = SceneConfig.from_dict(config['scene'])
        model = ModelConfig.from_dict(config['model'], scene.theta_min, scene.theta_max)
        weights = LossWeights.for_model(model, config.get('loss'))
        values = {k: v for k, v in config['train'].items() if v is not None}
        try:
            return cls(
                scene_config=scene, model_config=model, loss_weights=weights, **values
            )
        except (TypeError, ValueError) as err:
            msg = f'Invalid config at "train": {err}'
            raise ConfigError(msg) from None


@dataclass
class TrainingLog:
    losses: pd.DataFrame
    evaluations: pd.DataFrame
    checkpoint: Path = None

    @property
    def final_step(self):
        return int(self.losses['step'].iloc[-1]) + 1 if len(self.losses) else 0


def learning_rate_at(step, config):
    """Learning rate of (zero based) `step`: linear warmup, then cosine decay to 0"""
    if step < config.warmup_steps:
        return config.learning_rate * (step + 1) / config.warmup_steps
    decay_steps = max(config.steps - config.warmup_steps, 1)
    progress = min((step - config.warmup_steps) / decay_steps, 1.0)
    return config.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


def desk_reproducible(config):
    """Whether a run fits one commodity machine, logs a warning when it does not"""
    parameters = parameter_count(AngleTransformer(config.model_config))
    reasons = []
    if config.batch_size >= DESK_MAX_BATCH:
        reasons.append(f'batch size {config.batch_size}')
    if config.total_samples >= DESK_MAX_SAMPLES:
        reasons.append(f'{config.total_samples} samples')
    if parameters >= DESK_MAX_PARAMETERS:
        reasons.append(f'{parameters} parameters')
    if reasons:
        log(
            'Warning: this configuration is not desk-reproducible ('
            + ', '.join(reasons)
            + '); it needs a multi-GPU budget'
        )
    return not reasons


def checkpoint_path(out_dir, step):
    return Path(out_dir) / f'checkpoint-{step:07d}.aaetr'


def latest_checkpoint(out_dir):
    """Checkpoint with the highest step in `out_dir`, None when there is none"""
    paths = sorted(Path(out_dir).glob('checkpoint-*.aaetr'))
    return paths[-1] if paths else None


def _optimizer(model, config):
    return torch.optim.AdamW(
        model.parameters(),
        lr=config.learning_rate,
        weight_decay=config.weight_decay,
    )


def _optimizer_tensors(optimizer, model):
    tensors = {}
    for index, parameter in enumerate(model.parameters()):
        state = optimizer.state.get(parameter)
        if state:
            tensors[f'optimizer.{index}.exp_avg'] = state['exp_avg']
            tensors[f'optimizer.{index}.exp_avg_sq'] = state['exp_avg_sq']
    tensors['torch_rng_state'] = torch.get_rng_state()
    return tensors


def _restore_optimizer(optimizer, model, extra, optimizer_steps):
    state = optimizer.state_dict()
    for index, _ in enumerate(model.parameters()):
        key = f'optimizer.{index}'
        if f'{key}.exp_avg' not in extra:
            continue
        state['state'][index] = {
            'step': torch.tensor(float(optimizer_steps)),
            'exp_avg': extra[f'{key}.exp_avg'],
            'exp_avg_sq': extra[f'{key}.exp_avg_sq'],
        }
    optimizer.load_state_dict(state)
    if 'torch_rng_state' in extra:
        torch.set_rng_state(extra['torch_rng_state'].to(torch.uint8))


def _read_log(path, columns, step):
    if not path.exists():
        return pd.DataFrame(columns=list(columns))
    frame = pd.read_csv(path, float_precision='round_trip')
    return frame[frame['step'] < step].reset_index(drop=True)


def evaluate_checkpoint(
    model,
    geometry,
    scene_config,
    scenes=200,
    n_targets=None,
    seed=0,
    angle_tol_deg=0.5,
    thresholds=101,
    progress=False,
    workers=1,
):
    """EvalReports of `model` at the scene SNR on held-out evaluation scenes

    Parameters
    ----------
    model : AngleTransformer
        Weights to evaluate
    geometry : ArrayGeometry
        Array of the scenes
    scene_config : SceneConfig
        Training scene distribution, sets the SNR and dynamic range
    scenes : int
        Scenes per condition
    n_targets : tuple | None
        Target counts, 2 and n_max by default
    seed : int
        Evaluation seed
    angle_tol_deg : float
        Angle tolerance in degrees
    thresholds : int | array_like
        Confidence thresholds
    progress : bool
        Show a progress bar
    workers : int
        Scene generation threads

    Returns
    -------
    list of EvalReport
        One report per target count
    """
    if n_targets is None:
        n_targets = tuple(sorted({min(2, scene_config.n_max), scene_config.n_max}))
    grid = SweepGrid(
        snr_db=(scene_config.snr_db,),
        n_targets=tuple(n_targets),
        dynamic_range_db=(scene_config.alpha_max - scene_config.alpha_min,),
        scenes_per_condition=scenes,
    )
    return run_sweep(
        TransformerDetector(model, geometry),
        geometry,
        grid,
        scene_config,
        thresholds=thresholds,
        angle_tol_deg=angle_tol_deg,
        seed=seed,
        workers=workers,
        progress=progress,
    )


def train(config, geometry, out_dir=None, resume=False, progress=True, workers=1):
    """Train a transformer on the seeded scene stream

    Step `s` consumes scenes `s * batch_size` to `(s + 1) * batch_size - 1`
    of the `train` namespace stream, so the run only depends on the config
    and the seed. With `out_dir`, a checkpoint holding the weights, the
    optimizer moments and the RNG state is written every `eval_every` steps
    and at the end, next to `train_log.csv` and `eval_log.csv`.

    Parameters
    ----------
    config : TrainConfig
        Training settings
    geometry : ArrayGeometry
        Array the scenes are synthesized on
    out_dir : str | Path | None
        Output directory for checkpoints and logs
    resume : bool
        Continue from the latest checkpoint in `out_dir`
    progress : bool
        Show a progress bar
    workers : int
        Scene generation threads

    Returns
    -------
    tuple
        Trained model and its TrainingLog

    Raises
    ------
    NumericalError
        When the loss or an activation stops being finite
    """
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume and out_dir is None:
        msg = 'Resuming needs an output directory'
        raise ValueError(msg)
    desk_reproducible(config)

    start, last_checkpoint = 0, None
    if resume and latest_checkpoint(out_dir) is not None:
        last_checkpoint = latest_checkpoint(out_dir)
        model, metadata, extra = load_checkpoint(last_checkpoint, config.torch_dtype)
        if model.config != config.model_config:
            msg = f'{last_checkpoint} was trained with a different model config'
            raise ValueError(msg)
        start = int(metadata['step'])
        optimizer = _optimizer(model, config)
        _restore_optimizer(optimizer, model, extra, metadata['optimizer_steps'])
        log(f'Resuming from {last_checkpoint} at step {start}')
    else:
        if resume:
            log(f'No checkpoint in {out_dir}, starting from scratch')
        torch.manual_seed(config.seed)
        model = init_weights(config.model_config, config.seed, config.torch_dtype)
        optimizer = _optimizer(model, config)

    if out_dir is not None:
        losses = _read_log(out_dir / 'train_log.csv', LOG_COLUMNS, start)
        evaluations = _read_log(out_dir / 'eval_log.csv', EVAL_COLUMNS, start + 1)
    else:
        losses = pd.DataFrame(columns=list(LOG_COLUMNS))
        evaluations = pd.DataFrame(columns=list(EVAL_COLUMNS))
    loss_rows = losses.to_dict('records')
    eval_rows = evaluations.to_dict('records')

    stream = SceneStream(config.scene_config, geometry, config.seed, namespace='train')
    positions = element_positions(geometry, config.torch_dtype)
    parameters = parameter_count(model)
    log(
        f'Training {parameters} parameters for {config.steps} steps of '
        f'{config.batch_size} scenes'
    )

    def save(step):
        if out_dir is None:
            return None
        path = save_checkpoint(
            checkpoint_path(out_dir, step),
            model,
            metadata={
                'step': step,
                'optimizer_steps': step,
                'total_steps': config.steps,
                'train_config': config.to_dict(),
            },
            extra_tensors=_optimizer_tensors(optimizer, model),
        )
        pd.DataFrame(loss_rows, columns=list(LOG_COLUMNS)).to_csv(
            out_dir / 'train_log.csv', index=False
        )
        pd.DataFrame(eval_rows, columns=list(EVAL_COLUMNS)).to_csv(
            out_dir / 'eval_log.csv', index=False
        )
        return path

    model.train()
    for step in tqdm(
        range(start, config.steps),
        initial=start,
        total=config.steps,
        desc='Training',
        unit=' step',
        disable=not progress,
    ):
        scenes = stream.take(
            step * config.batch_size, (step + 1) * config.batch_size, workers
        )
        signal = snapshot_features(
            np.stack([scene.snapshot for scene in scenes]), config.torch_dtype
        )
        try:
            predictions = model(signal, positions)
        except NumericalError as err:
            msg = f'{err} at step {step}, last checkpoint: {last_checkpoint}'
            raise NumericalError(msg) from None
        total, components, _ = batch_loss(
            [scene.targets for scene in scenes], predictions, config.loss_weights
        )
        if not torch.isfinite(total):
            msg = (
                f'Non-finite training loss at step {step}, '
                f'last checkpoint: {last_checkpoint}'
            )
            raise NumericalError(msg)

        for group in optimizer.param_groups:
            group['lr'] = learning_rate_at(step, config)
        optimizer.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip_norm)
        optimizer.step()

        loss_rows.append(
            {
                'step': step,
                'total': total.item(),
                **{name: components[name].item() for name in LOSS_COMPONENTS},
            }
        )

        done = step + 1
        if done % config.eval_every == 0 or done == config.steps:
            if config.eval_scenes:
                for report in evaluate_checkpoint(
                    model,
                    geometry,
                    config.scene_config,
                    scenes=config.eval_scenes,
                    seed=config.seed,
                    workers=workers,
                ):
                    eval_rows.append(
                        {
                            'step': done,
                            'snr_db': report.condition.snr_db,
                            'n_targets': report.condition.n_targets,
                            'dynamic_range_db': report.condition.dynamic_range_db,
                            'max_f1': report.max_f1,
                            'mean_angle_l1_deg': report.mean_angle_l1_deg,
                            'mean_mag_l1_db': report.mean_mag_l1_db,
                        }
                    )
            last_checkpoint = save(done) or last_checkpoint
            log(f'Step {done}: loss {total.item():.5f}')
        model.train()

    training_log = TrainingLog(
        losses=pd.DataFrame(loss_rows, columns=list(LOG_COLUMNS)),
        evaluations=pd.DataFrame(eval_rows, columns=list(EVAL_COLUMNS)),
        checkpoint=last_checkpoint,
    )
    return model, training_log
