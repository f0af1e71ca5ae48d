"""gridless_aoa Module"""
from ._version import __version__

# Speed of light in m/s
SPEED_OF_LIGHT = 299_792_458.0

# Default carrier is a 77 GHz automotive radar
DEFAULT_CARRIER_HZ = 77e9
DEFAULT_WAVELENGTH = SPEED_OF_LIGHT / DEFAULT_CARRIER_HZ

# Exit codes used by the CLI
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3

# Magic bytes of the on-disk formats
CHECKPOINT_MAGIC = b'AAETR01'
SHARD_MAGIC = b'AOA1'

# Environment variable capping worker parallelism
THREADS_ENV = 'AOA_THREADS'

# Config file looked up in the working directory when none is named
CONFIG_FILE = '.gridless-aoa.json'

# Config sections understood by the package
CONFIG_SECTIONS = ['geometry', 'scene', 'model', 'loss', 'train', 'iaa', 'eval']

# Desk preset. Every key of the schema has a default here so that a config
# file only needs to carry the keys it changes.
DEFAULT_CONFIG = {
    'geometry': {
        'kind': 'ula',
        'count': 16,
        'spacing_m': None,
        'wavelength_m': DEFAULT_WAVELENGTH,
        'tx_positions_m': [],
        'rx_positions_m': [],
        'path': None,
    },
    'scene': {
        'n_max': 4,
        'theta_min': -60.0,
        'theta_max': 60.0,
        'alpha_min': None,
        'alpha_max': 0.0,
        'dynamic_range_db': 13.0,
        'snr_db': 35.0,
        'fixed_n': None,
    },
    'model': {
        'embed_dim': 32,
        'encoder_blocks': 2,
        'decoder_blocks': 2,
        'num_queries': 16,
        'attention_heads': 8,
        'ffn_hidden': None,
        'dropout': 0.0,
        'mag_min': -30.0,
        'mag_max': 10.0,
    },
    'loss': {
        'w_theta': 5.0,
        'w_alpha': 2.0,
        'w_noobj': 0.1,
    },
    'train': {
        'batch_size': 256,
        'total_samples': 2_000_000,
        'learning_rate': 5e-4,
        'warmup_steps': 200,
        'grad_clip_norm': 1.0,
        'weight_decay': 1e-4,
        'eval_every': 500,
        'eval_scenes': 200,
        'seed': 0,
        'dtype': 'float32',
    },
    'iaa': {
        'grid_size': 512,
        'iterations': 15,
        'diagonal_loading': 1e-6,
        'max_peaks': 16,
        'confidence_center_db': -20.0,
        'confidence_scale_db': 5.0,
    },
    'eval': {
        'grid': 'desk',
        'snr_db': None,
        'n_targets': None,
        'dynamic_range_db': None,
        'scenes_per_condition': None,
        'angle_tol_deg': 0.5,
        'thresholds': 101,
        'one_to_one': False,
        'confidence_threshold': 0.5,
        'seed': 0,
    },
}

# Keys that differ from the desk preset for a run at the published scale
PAPER_OVERRIDES = {
    'geometry': {'kind': 'sparse48'},
    'scene': {'n_max': 10},
    'model': {
        'embed_dim': 128,
        'encoder_blocks': 6,
        'decoder_blocks': 6,
        'num_queries': 80,
        'attention_heads': 8,
        'ffn_hidden': 256,
    },
    'train': {
        'batch_size': 32768,
        'total_samples': 63_000_000,
        'learning_rate': 1e-4,
        'warmup_steps': 2000,
        'eval_every': 5000,
    },
    'eval': {'grid': 'paper'},
}

__all__ = ['__version__']
