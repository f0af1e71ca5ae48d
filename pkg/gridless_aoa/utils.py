"""Utility functions for gridless-aoa"""
import copy
import json
import os
import platform
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import jsonschema
import numpy as np
import toml
from importlib_resources import files

from gridless_aoa import CONFIG_FILE
from gridless_aoa import DEFAULT_CONFIG
from gridless_aoa import PAPER_OVERRIDES
from gridless_aoa import THREADS_ENV
from gridless_aoa._version import __version__

PYPROJECT = Path('pyproject.toml')

SCHEMA = files('gridless_aoa').joinpath('schema.json').read_text()
SCHEMA = json.loads(SCHEMA)


class ConfigError(Exception):
    """Raised when the configuration is invalid or inconsistent"""


class NumericalError(Exception):
    """Raised on singular covariances and non-finite activations or losses"""


class OverrideParamType(click.ParamType):
    """Custom Parameter Type used in click for casting `section.key=value` overrides"""

    name = 'override'

    def convert(self, value, param, ctx):
        if isinstance(value, tuple):
            return value

        key, sep, raw = value.partition('=')
        keys = key.strip().split('.')
        if not sep or len(keys) != 2 or not all(keys):
            self.fail(
                f'Overrides must look like section.key=value, got {value!r}',
                param,
                ctx,
            )
        try:
            parsed = json.loads(raw)
        except json.decoder.JSONDecodeError:
            parsed = raw
        return (keys[0], keys[1], parsed)


ConfigOverride = OverrideParamType()


def log(*outputs, **kwargs):
    """Log an output to stderr"""
    kwargs.setdefault('file', sys.stderr)
    print(*outputs, **kwargs)  # noqa: T201


def merge_config(base, overrides):
    """Deep merge `overrides` into a copy of `base`

    Parameters
    ----------
    base : dict
        Config data to start from
    overrides : dict
        Sections whose keys replace the ones in `base`

    Returns
    -------
    dict
        Merged config data
    """
    merged = copy.deepcopy(base)
    for section, values in (overrides or {}).items():
        if isinstance(values, dict) and isinstance(merged.get(section), dict):
            merged[section].update(copy.deepcopy(values))
        else:
            merged[section] = copy.deepcopy(values)
    return merged


def validate_config(config):
    """Validate config data against the bundled schema

    Parameters
    ----------
    config : dict
        Config data

    Raises
    ------
    ConfigError
        With a dotted pointer to the offending key
    """
    try:
        jsonschema.validate(config, schema=SCHEMA)
    except jsonschema.exceptions.ValidationError as err:
        pointer = '.'.join(str(part) for part in err.absolute_path) or '<root>'
        msg = f'Invalid config at "{pointer}": {err.message}'
        raise ConfigError(msg) from None


def read_config(path):
    """Read the gridless-aoa config data

    JSON files are read unless the path ends in `.toml`. When the path is
    None or the default `.gridless-aoa.json` and no such file exists,
    `[tool.gridless-aoa]` of `pyproject.toml` in the current directory is
    used. The result is validated and merged over the defaults of its
    `preset` (`desk` unless set).

    Parameters
    ----------
    path : str | None
        Path to the config file

    Returns
    -------
    dict
        Config data with every section filled in

    Raises
    ------
    ConfigError
        When a named config file is missing or invalid
    """
    config = None

    if path is not None and not Path(path).exists() and str(path) != CONFIG_FILE:
        msg = f'Config file {path} does not exist'
        raise ConfigError(msg)

    if path is not None and Path(path).exists():
        text = Path(path).read_text(encoding='utf-8')
        try:
            if Path(path).suffix == '.toml':
                config = toml.loads(text)
            else:
                config = json.loads(text)
        except (toml.TomlDecodeError, json.decoder.JSONDecodeError) as err:
            msg = f'Failed to parse config file {path}: {err}'
            raise ConfigError(msg) from None
        log(f'gridless-aoa configuration loaded from {Path(path)}.')

    if PYPROJECT.exists():
        data = toml.loads(PYPROJECT.read_text(encoding='utf-8'))
        pyproject_config = data.get('tool', {}).get('gridless-aoa')
        if pyproject_config:
            if not config:
                config = pyproject_config
                log(f'gridless-aoa configuration loaded from {PYPROJECT}.')
            else:
                log(f'Ignoring gridless-aoa configuration from {PYPROJECT}.')

    config = config or {}
    validate_config(config)
    return merge_config(preset_config(config.pop('preset', 'desk')), config)


def preset_config(name):
    """Default config data of the `desk` or `paper` preset"""
    if name == 'paper':
        return merge_config(DEFAULT_CONFIG, PAPER_OVERRIDES)
    return copy.deepcopy(DEFAULT_CONFIG)


def apply_overrides(config, overrides):
    """Apply `(section, key, value)` overrides and validate the result"""
    updated = copy.deepcopy(config)
    for section, key, value in overrides:
        updated.setdefault(section, {})[key] = value
    validate_config(updated)
    return updated


def print_config(config):
    """Print gridless-aoa config data when there is an error in CLI

    Parameters
    ----------
    config : dict
        Config data
    """
    log('Current gridless-aoa config: \n')
    log(json.dumps(config, indent=2))


def get_worker_count():
    """Number of worker threads, capped by the AOA_THREADS environment variable

    Returns
    -------
    int
        Worker count, at least 1

    Raises
    ------
    ConfigError
        When AOA_THREADS is not a positive integer
    """
    value = os.environ.get(THREADS_ENV)
    if value is None:
        return os.cpu_count() or 1
    try:
        workers = int(value)
    except ValueError:
        workers = 0
    if workers < 1:
        msg = f'{THREADS_ENV} must be a positive integer, got {value!r}'
        raise ConfigError(msg)
    return workers


def parallel_map(func, items, workers=1):
    """Ordered map over `items`, fanned out on a thread pool when `workers > 1`"""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [func(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


def _json_default(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    msg = f'Object of type {type(value).__name__} is not JSON serializable'
    raise TypeError(msg)


def write_json(path, data):
    """Write `data` as indented JSON with sorted keys"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(
        json.dumps(data, indent=2, sort_keys=True, default=_json_default) + '\n',
        encoding='utf-8',
    )
    return path


def write_manifest(path, config, seeds=None, **extra):
    """Write a reproducibility manifest

    Parameters
    ----------
    path : str | Path
        Manifest file
    config : dict
        Effective config data
    seeds : dict | None
        Seeds used by the run
    extra : dict
        Any other entries, e.g. the command that was run

    Returns
    -------
    Path
        Manifest path
    """
    import torch

    manifest = {
        'version': __version__,
        'config': config,
        'seeds': seeds or {},
        'libraries': {
            'python': platform.python_version(),
            'numpy': np.__version__,
            'torch': torch.__version__,
        },
        **extra,
    }
    return write_json(path, manifest)
