"""CLI arguments and main entry point for gridless-aoa"""
import functools
import json
import sys
from pathlib import Path

import click
import torch
from tqdm.auto import tqdm

from gridless_aoa import CONFIG_FILE
from gridless_aoa import EXIT_CONFIG_ERROR
from gridless_aoa import EXIT_RUNTIME_ERROR
from gridless_aoa._version import __version__
from gridless_aoa.array import geometry_from_config
from gridless_aoa.baselines import ConfidenceMap
from gridless_aoa.baselines import IaaConfig
from gridless_aoa.baselines import IaaDetector
from gridless_aoa.baselines import MatchedFilterDetector
from gridless_aoa.evaluate import SweepGrid
from gridless_aoa.evaluate import run_sweep
from gridless_aoa.evaluate import write_reports
from gridless_aoa.model import TransformerDetector
from gridless_aoa.model import load_checkpoint
from gridless_aoa.render import render_comparison
from gridless_aoa.render import splat
from gridless_aoa.simulate import SceneConfig
from gridless_aoa.simulate import make_scene
from gridless_aoa.simulate import scene_seed
from gridless_aoa.simulate import stream_scenes
from gridless_aoa.simulate import write_shard
from gridless_aoa.train import TrainConfig
from gridless_aoa.train import train as run_training
from gridless_aoa.utils import ConfigError
from gridless_aoa.utils import ConfigOverride
from gridless_aoa.utils import NumericalError
from gridless_aoa.utils import apply_overrides
from gridless_aoa.utils import get_worker_count
from gridless_aoa.utils import log
from gridless_aoa.utils import print_config
from gridless_aoa.utils import read_config
from gridless_aoa.utils import write_manifest

# Scenes generated per progress bar update
GENERATE_CHUNK = 1024

BASELINES = {'iaa': IaaDetector, 'mf': MatchedFilterDetector}


def configure(ctx, _, filename):
    """Callback when invoked main command"""
    try:
        config = read_config(filename)
    except ConfigError as err:
        log(f'{err}. Exiting...')
        sys.exit(EXIT_CONFIG_ERROR)
    ctx.obj = {'config': config, 'config_path': filename}


def exit_on_error(func):
    """Map package errors of a command to the documented exit codes"""

    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        config = click.get_current_context().find_root().obj['config']
        try:
            return func(*args, **kwargs)
        except ConfigError as err:
            log(f'{err}. Exiting...')
            print_config(config)
            sys.exit(EXIT_CONFIG_ERROR)
        except (NumericalError, RuntimeError, OSError, ValueError) as err:
            log(f'{type(err).__name__}: {err}. Exiting...')
            sys.exit(EXIT_RUNTIME_ERROR)

    return wrapper


def _scene_config(config):
    return SceneConfig.from_dict(config['scene'])


def _baseline(method, config, geometry, scene):
    section = config['iaa']
    return BASELINES[method](
        geometry,
        IaaConfig.from_dict(section, scene.theta_min, scene.theta_max),
        ConfidenceMap.from_dict(section),
    )


@click.group(invoke_without_command=True)
@click.option(
    '-c',
    '--config',
    type=click.Path(dir_okay=False),
    default=CONFIG_FILE,
    callback=configure,
    is_eager=True,
    expose_value=False,
    help="""A JSON file that configures gridless-aoa, or a TOML file when its
    name ends in `.toml`. The file has the sections `geometry`, `scene`,
    `model`, `loss`, `train`, `iaa` and `eval`; keys that are left out take
    the defaults of the desk preset, or of the published scale when the file
    sets `"preset": "paper"`.

    By default, config file .gridless-aoa.json in current directory will be
    used if it exists. Otherwise the `[tool.gridless-aoa]` section of
    `pyproject.toml` is used.

    The file is validated against the bundled schema, unknown keys are
    rejected.""",
    show_default=True,
    metavar='<str>',
)
@click.option(
    '--set',
    'overrides',
    multiple=True,
    type=ConfigOverride,
    help="""Override a config key, e.g. `--set scene.snr_db=25`. The value is
    parsed as JSON and taken as a plain string otherwise. Can be passed multiple
    times.""",
    metavar='<section.key=value>',
)
@click.option(
    '--print-config',
    'show_config',
    is_flag=True,
    help="""Prints the effective configuration as JSON to stdout and exits""",
    default=False,
    show_default=True,
)
@click.version_option(__version__, prog_name='gridless-aoa')
@click.pass_context
def main(ctx, overrides, show_config):
    """Gridless angle of arrival estimation for MIMO radar snapshots"""
    try:
        ctx.obj['config'] = apply_overrides(ctx.obj['config'], overrides)
        ctx.obj['workers'] = get_worker_count()
    except ConfigError as err:
        log(f'{err}. Exiting...')
        sys.exit(EXIT_CONFIG_ERROR)
    torch.set_num_threads(ctx.obj['workers'])

    if show_config:
        click.echo(json.dumps(ctx.obj['config'], indent=2, sort_keys=True))
        ctx.exit(0)
    if ctx.invoked_subcommand is None:
        click.echo(ctx.get_help())


@main.command()
@click.option(
    '-o',
    '--out',
    type=click.Path(dir_okay=False),
    required=True,
    help="""Shard file to write. A manifest is written next to it.""",
    metavar='<str>',
)
@click.option(
    '-n',
    '--count',
    type=click.IntRange(min=0),
    default=1000,
    show_default=True,
    help="""Number of scenes""",
    metavar='<int>',
)
@click.option(
    '--seed',
    type=click.IntRange(min=0),
    default=0,
    show_default=True,
    help="""Start seed of the dataset stream""",
    metavar='<int>',
)
@click.option(
    '--format',
    'shard_format',
    type=click.Choice(['jsonl', 'binary']),
    default=None,
    help="""Shard layout. By default binary when the file name ends in `.bin`,
    JSON lines otherwise.""",
)
@click.pass_obj
@exit_on_error
def generate(obj, out, count, seed, shard_format):
    """Generate a seeded dataset shard of synthetic scenes"""
    config = obj['config']
    geometry = geometry_from_config(config['geometry'])
    stream = stream_scenes(_scene_config(config), geometry, seed, namespace='dataset')

    scenes = []
    with tqdm(total=count, desc='Generating', unit=' scene', disable=not count) as bar:
        for start in range(0, count, GENERATE_CHUNK):
            stop = min(start + GENERATE_CHUNK, count)
            scenes.extend(stream.take(start, stop, obj['workers']))
            bar.update(stop - start)

    binary = None if shard_format is None else shard_format == 'binary'
    path = write_shard(scenes, out, binary=binary)
    write_manifest(
        Path(f'{path}.manifest.json'),
        config,
        seeds={'namespace': 'dataset', 'start_seed': seed},
        command='generate',
        count=count,
        geometry=geometry.to_dict(),
    )
    log(f'Wrote {count} scenes to {path}')


@main.command()
@click.option(
    '-o',
    '--out-dir',
    type=click.Path(file_okay=False),
    required=True,
    help="""Directory for checkpoints, loss logs and the manifest""",
    metavar='<str>',
)
@click.option(
    '--resume',
    is_flag=True,
    default=False,
    help="""Continue from the latest checkpoint in the output directory""",
)
@click.option(
    '--progress/--no-progress',
    default=True,
    show_default=True,
    help="""Show a progress bar""",
)
@click.pass_obj
@exit_on_error
def train(obj, out_dir, resume, progress):
    """Train the transformer on the on-the-fly scene stream"""
    config = obj['config']
    train_config = TrainConfig.from_config(config)
    geometry = geometry_from_config(config['geometry'])
    out_dir = Path(out_dir)
    write_manifest(
        out_dir / 'manifest.json',
        config,
        seeds={'namespace': 'train', 'seed': train_config.seed},
        command='train',
        resume=resume,
        steps=train_config.steps,
        geometry=geometry.to_dict(),
    )
    _, training_log = run_training(
        train_config,
        geometry,
        out_dir=out_dir,
        resume=resume,
        progress=progress,
        workers=obj['workers'],
    )
    if len(training_log.evaluations):
        final = training_log.evaluations[
            training_log.evaluations['step'] == training_log.evaluations['step'].max()
        ]
        for row in final.itertuples():
            log(f'Final max F1 at N = {row.n_targets}: {row.max_f1:.3f}')
    log(f'Final checkpoint: {training_log.checkpoint}')


@main.command(name='eval')
@click.option(
    '--checkpoint',
    type=click.Path(dir_okay=False, exists=True),
    default=None,
    help="""Transformer checkpoint to evaluate""",
    metavar='<str>',
)
@click.option(
    '-m',
    '--method',
    type=click.Choice(sorted(BASELINES)),
    multiple=True,
    help="""Grid-based baseline to evaluate. Can be passed multiple times and
    together with --checkpoint, all detectors then see the same scenes.""",
)
@click.option(
    '--grid',
    type=click.Choice(['desk', 'paper']),
    default=None,
    help="""Sweep preset, `eval.grid` of the config by default""",
)
@click.option(
    '-o',
    '--out',
    type=click.Path(file_okay=False),
    required=True,
    help="""Directory for report.csv, summary.json and the SVG plots""",
    metavar='<str>',
)
@click.option(
    '--one-to-one',
    is_flag=True,
    default=None,
    help="""Let each ground truth target be claimed by one detection only""",
)
@click.option(
    '--angle-tol',
    type=click.FloatRange(min=0, min_open=True),
    default=None,
    help="""Angle tolerance in degrees, `eval.angle_tol_deg` by default""",
    metavar='<float>',
)
@click.option(
    '--progress/--no-progress',
    default=True,
    show_default=True,
    help="""Show a progress bar""",
)
@click.pass_obj
@exit_on_error
def evaluate(obj, checkpoint, method, grid, out, one_to_one, angle_tol, progress):
    """Evaluate detectors over a sweep of SNR and target count"""
    if not checkpoint and not method:
        msg = 'Pass --checkpoint and/or --method'
        raise click.UsageError(msg)
    config = obj['config']
    section = dict(config['eval'])
    if grid is not None:
        section['grid'] = grid
    sweep = SweepGrid.from_dict(section)
    scene = _scene_config(config)
    geometry = geometry_from_config(config['geometry'])

    detectors = []
    if checkpoint:
        model, _, _ = load_checkpoint(checkpoint)
        detectors.append(TransformerDetector(model, geometry))
    detectors.extend(_baseline(name, config, geometry, scene) for name in method)

    reports, timings = [], []
    for detector in detectors:
        reports.extend(
            run_sweep(
                detector,
                geometry,
                sweep,
                scene,
                thresholds=section['thresholds'],
                angle_tol_deg=angle_tol or section['angle_tol_deg'],
                one_to_one=section['one_to_one'] if one_to_one is None else one_to_one,
                seed=section['seed'],
                workers=obj['workers'],
                progress=progress,
                timings=timings,
            )
        )
    paths = write_reports(
        out,
        reports,
        timings,
        detectors={d.name: d.describe() for d in detectors},
    )
    write_manifest(
        Path(out) / 'manifest.json',
        config,
        seeds={'namespace': 'eval', 'seed': section['seed']},
        command='eval',
        checkpoint=checkpoint,
        methods=list(method),
        grid=section['grid'],
    )
    log(f'Wrote {paths["report"]} and {paths["summary"]}')


@main.command()
@click.option(
    '--scene-seed',
    'scene_seed_value',
    type=click.IntRange(min=0),
    default=0,
    show_default=True,
    help="""Seed of the rendered scene""",
    metavar='<int>',
)
@click.option(
    '--checkpoint',
    type=click.Path(dir_okay=False, exists=True),
    default=None,
    help="""Transformer checkpoint, its detections are splatted onto the grid""",
    metavar='<str>',
)
@click.option(
    '-o',
    '--out',
    type=click.Path(dir_okay=False),
    required=True,
    help="""SVG file to write""",
    metavar='<str>',
)
@click.option(
    '--n-targets',
    type=click.IntRange(min=0),
    default=None,
    help="""Exact number of targets, drawn from the config otherwise""",
    metavar='<int>',
)
@click.option(
    '--snr',
    type=float,
    default=None,
    help="""SNR of the scene in dB, `scene.snr_db` by default""",
    metavar='<float>',
)
@click.pass_obj
@exit_on_error
def compare(obj, scene_seed_value, checkpoint, out, n_targets, snr):
    """Render matched filter, IAA and transformer spectra of one scene"""
    config = obj['config']
    scene_config = _scene_config(config)
    snr = scene_config.snr_db if snr is None else snr
    if n_targets is None:
        scene_config = SceneConfig.from_dict({**config['scene'], 'snr_db': snr})
    else:
        scene_config = scene_config.for_condition(
            snr, n_targets, scene_config.alpha_max - scene_config.alpha_min
        )
    geometry = geometry_from_config(config['geometry'])
    scene = make_scene(scene_config, geometry, scene_seed('dataset', scene_seed_value))

    baselines = {
        name: _baseline(name, config, geometry, scene_config) for name in BASELINES
    }
    spectra = {
        'matched filter': baselines['mf'].spectrum(scene.snapshot),
        'IAA': baselines['iaa'].spectrum(scene.snapshot),
    }
    if checkpoint:
        model, _, _ = load_checkpoint(checkpoint)
        detections = TransformerDetector(model, geometry)(scene)
        spectra['transformer (splat)'] = splat(
            detections, baselines['iaa'].grid, config['eval']['confidence_threshold']
        )

    svg = render_comparison(
        spectra,
        scene.targets,
        title=(
            f'Scene {scene_seed_value}: {len(scene.targets)} targets, '
            f'SNR {scene.snr_db:g} dB'
        ),
    )
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(svg, encoding='utf-8')
    write_manifest(
        Path(f'{out}.manifest.json'),
        config,
        seeds={'namespace': 'dataset', 'scene_seed': scene_seed_value},
        command='compare',
        checkpoint=checkpoint,
        scene=scene.to_record(),
    )
    log(f'Wrote {out}')


if __name__ == '__main__':
    main()
