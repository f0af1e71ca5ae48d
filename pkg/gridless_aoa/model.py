"""Set-prediction transformer mapping a snapshot to gridless detections"""
import json
import struct
from dataclasses import asdict
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
from scipy.special import expit
from torch import nn

from gridless_aoa import CHECKPOINT_MAGIC
from gridless_aoa.detections import DetectionSet
from gridless_aoa.detections import clip_confidences
from gridless_aoa.utils import ConfigError
from gridless_aoa.utils import NumericalError

CHECKPOINT_FORMAT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 32
    encoder_blocks: int = 2
    decoder_blocks: int = 2
    num_queries: int = 16
    attention_heads: int = 8
    ffn_hidden: int = None
    dropout: float = 0.0
    theta_min: float = -60.0
    theta_max: float = 60.0
    mag_min: float = -30.0
    mag_max: float = 10.0

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_queries < 1 or self.attention_heads < 1:
            msg = 'embed_dim, num_queries and attention_heads must be positive'
            raise ValueError(msg)
        if self.embed_dim % self.attention_heads:
            msg = (
                f'embed_dim = {self.embed_dim} is not divisible by '
                f'attention_heads = {self.attention_heads}'
            )
            raise ValueError(msg)
        if self.encoder_blocks < 0 or self.decoder_blocks < 1:
            msg = 'Need at least one decoder block and a non-negative encoder depth'
            raise ValueError(msg)
        if not 0 <= self.dropout < 1:
            msg = f'dropout must lie in [0, 1), got {self.dropout}'
            raise ValueError(msg)
        if not self.theta_min < self.theta_max or not self.mag_min < self.mag_max:
            msg = 'Output ranges must satisfy theta_min < theta_max, mag_min < mag_max'
            raise ValueError(msg)

    @property
    def hidden(self):
        """Width of the feed-forward layers, 4 x embed_dim unless set"""
        return self.ffn_hidden or 4 * self.embed_dim

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, section, theta_min=None, theta_max=None):
        """Build from the `model` config section, over the scene field of view"""
        values = {k: v for k, v in section.items() if v is not None}
        if theta_min is not None:
            values['theta_min'] = theta_min
        if theta_max is not None:
            values['theta_max'] = theta_max
        try:
            return cls(**values)
        except (TypeError, ValueError) as err:
            msg = f'Invalid config at "model": {err}'
            raise ConfigError(msg) from None


# Published scale, with 2 x D wide feed-forward layers (about 1.66M parameters)
PAPER_MODEL = ModelConfig(
    embed_dim=128,
    encoder_blocks=6,
    decoder_blocks=6,
    num_queries=80,
    attention_heads=8,
    ffn_hidden=256,
)
DESK_MODEL = ModelConfig()


class Predictions(NamedTuple):
    """Raw head outputs, shaped (B, M) or (M,) for a single item"""

    angles: torch.Tensor
    magnitudes: torch.Tensor
    logits: torch.Tensor

    @property
    def confidences(self):
        return torch.sigmoid(self.logits)

    def item(self, index):
        return Predictions(
            self.angles[index], self.magnitudes[index], self.logits[index]
        )

    def numpy(self):
        """Angles, magnitudes and logits as float64 arrays"""
        return tuple(
            t.detach().cpu().to(torch.float64).numpy()
            for t in (self.angles, self.magnitudes, self.logits)
        )

    def detection_set(self):
        angles, magnitudes, logits = self.numpy()
        return DetectionSet(angles, magnitudes, clip_confidences(expit(logits)))

    def detection_sets(self):
        angles, magnitudes, logits = self.numpy()
        confidences = clip_confidences(expit(logits))
        return [
            DetectionSet(a, m, c) for a, m, c in zip(angles, magnitudes, confidences)
        ]


class FeedForward(nn.Sequential):
    def __init__(self, dim, hidden, dropout) -> None:
        super().__init__(
            nn.Linear(dim, hidden),
            nn.ReLU(),
            nn.Dropout(dropout),
            nn.Linear(hidden, dim),
        )


class EncoderBlock(nn.Module):
    """Pre-LN self-attention block, positions added to queries and keys"""

    def __init__(self, config) -> None:
        super().__init__()
        dim = config.embed_dim
        self.attention_norm = nn.LayerNorm(dim)
        self.attention = nn.MultiheadAttention(
            dim, config.attention_heads, dropout=config.dropout, batch_first=True
        )
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, config.hidden, config.dropout)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, tokens, positions):
        normed = self.attention_norm(tokens)
        query = normed + positions
        attended, _ = self.attention(query, query, normed, need_weights=False)
        tokens = tokens + self.dropout(attended)
        return tokens + self.dropout(self.ffn(self.ffn_norm(tokens)))


class DecoderBlock(nn.Module):
    """Pre-LN cross-attention block of the queries over the encoded elements"""

    def __init__(self, config) -> None:
        super().__init__()
        dim = config.embed_dim
        self.attention_norm = nn.LayerNorm(dim)
        self.attention = nn.MultiheadAttention(
            dim, config.attention_heads, dropout=config.dropout, batch_first=True
        )
        self.ffn_norm = nn.LayerNorm(dim)
        self.ffn = FeedForward(dim, config.hidden, config.dropout)
        self.dropout = nn.Dropout(config.dropout)

    def forward(self, queries, query_positions, memory, memory_positions):
        normed = self.attention_norm(queries)
        attended, _ = self.attention(
            normed + query_positions,
            memory + memory_positions,
            memory,
            need_weights=False,
        )
        queries = queries + self.dropout(attended)
        return queries + self.dropout(self.ffn(self.ffn_norm(queries)))


class Head(nn.Sequential):
    def __init__(self, dim) -> None:
        super().__init__(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 1))


def _check_finite(tensor, where):
    if not torch.isfinite(tensor).all():
        msg = f'Non-finite activations after {where}'
        raise NumericalError(msg)


class AngleTransformer(nn.Module):
    """Encoder-decoder transformer over array elements

    Each element contributes a token projected from (Re y_k, Im y_k) and a
    positional encoding projected from its position in wavelengths. M learned
    queries decode into (angle, magnitude, confidence logit) triples.
    """

    def __init__(self, config) -> None:
        super().__init__()
        self.config = config
        dim = config.embed_dim
        self.signal_projection = nn.Linear(2, dim)
        self.position_projection = nn.Linear(3, dim)
        self.encoder = nn.ModuleList(
            [EncoderBlock(config) for _ in range(config.encoder_blocks)]
        )
        self.encoder_norm = nn.LayerNorm(dim)
        self.query_content = nn.Parameter(torch.zeros(config.num_queries, dim))
        self.query_positions = nn.Parameter(torch.zeros(config.num_queries, dim))
        self.decoder = nn.ModuleList(
            [DecoderBlock(config) for _ in range(config.decoder_blocks)]
        )
        self.decoder_norm = nn.LayerNorm(dim)
        self.angle_head = Head(dim)
        self.magnitude_head = Head(dim)
        self.confidence_head = Head(dim)

    def forward(self, signal, positions):
        """Decode a batch of snapshots

        Parameters
        ----------
        signal : torch.Tensor
            (B, K, 2) real and imaginary parts
        positions : torch.Tensor
            (K, 3) or (B, K, 3) element positions in wavelengths

        Returns
        -------
        Predictions
            Tensors shaped (B, M)
        """
        tokens = self.signal_projection(signal)
        encodings = self.position_projection(positions)
        if encodings.dim() == 2:
            encodings = encodings.unsqueeze(0).expand_as(tokens)
        _check_finite(tokens, 'input projection')

        for index, block in enumerate(self.encoder):
            tokens = block(tokens, encodings)
            _check_finite(tokens, f'encoder block {index}')
        memory = self.encoder_norm(tokens)

        batch = signal.shape[0]
        queries = self.query_content.unsqueeze(0).expand(batch, -1, -1)
        query_positions = self.query_positions.unsqueeze(0).expand(batch, -1, -1)
        for index, block in enumerate(self.decoder):
            queries = block(queries, query_positions, memory, encodings)
            _check_finite(queries, f'decoder block {index}')
        decoded = self.decoder_norm(queries)

        config = self.config
        theta_span = config.theta_max - config.theta_min
        mag_span = config.mag_max - config.mag_min
        angles = config.theta_min + theta_span * torch.sigmoid(
            self.angle_head(decoded).squeeze(-1)
        )
        magnitudes = config.mag_min + mag_span * torch.sigmoid(
            self.magnitude_head(decoded).squeeze(-1)
        )
        logits = self.confidence_head(decoded).squeeze(-1)
        _check_finite(logits, 'output heads')
        return Predictions(angles, magnitudes, logits)


def _fan_in_uniform_(weight, generator):
    bound = 1.0 / np.sqrt(weight.shape[1])
    values = torch.rand(weight.shape, generator=generator, dtype=torch.float32)
    weight.copy_((values * 2 - 1) * bound)


def init_weights(config, seed=0, dtype=torch.float32):
    """Freshly initialized model, deterministic in `seed`

    Linear and attention projections draw from U(-1/sqrt(fan_in),
    1/sqrt(fan_in)), biases are zero, LayerNorm gains one and the query
    content and positions are standard normal.

    Parameters
    ----------
    config : ModelConfig
        Model hyper-parameters
    seed : int
        Initialization seed
    dtype : torch.dtype
        Parameter dtype

    Returns
    -------
    AngleTransformer
        Model in training mode
    """
    model = AngleTransformer(config)
    generator = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for module in model.modules():
            if isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
            elif isinstance(module, nn.Linear):
                _fan_in_uniform_(module.weight, generator)
                module.bias.zero_()
            elif isinstance(module, nn.MultiheadAttention):
                _fan_in_uniform_(module.in_proj_weight, generator)
                module.in_proj_bias.zero_()
        for parameter in (model.query_content, model.query_positions):
            parameter.copy_(
                torch.randn(parameter.shape, generator=generator, dtype=torch.float32)
            )
    return model.to(dtype)


def parameter_count(model):
    """Number of trainable scalars"""
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def model_dtype(model):
    return next(model.parameters()).dtype


def snapshot_features(snapshots, dtype=torch.float32):
    """(B, K) complex snapshots to a (B, K, 2) real tensor"""
    snapshots = np.asarray(snapshots, dtype=complex)
    stacked = np.stack([snapshots.real, snapshots.imag], axis=-1)
    return torch.as_tensor(stacked, dtype=dtype)


def element_positions(geometry, dtype=torch.float32):
    return torch.as_tensor(geometry.positions_in_wavelengths(), dtype=dtype)


def forward_batch(model, geometry, snapshots, chunk_size=4096):
    """Detections for a batch of snapshots

    Parameters
    ----------
    model : AngleTransformer
        Model weights
    geometry : ArrayGeometry
        Array the snapshots were measured on
    snapshots : array_like
        B x K complex snapshots
    chunk_size : int
        Snapshots per forward pass

    Returns
    -------
    list of DetectionSet
        One detection set per snapshot
    """
    snapshots = np.asarray(snapshots, dtype=complex)
    if snapshots.ndim != 2 or snapshots.shape[1] != geometry.element_count:
        msg = (
            f'Expected snapshots of {geometry.element_count} elements, got array of '
            f'shape {snapshots.shape}'
        )
        raise ValueError(msg)
    dtype = model_dtype(model)
    positions = element_positions(geometry, dtype)

    training = model.training
    model.eval()
    detections = []
    try:
        with torch.no_grad():
            for start in range(0, len(snapshots), chunk_size):
                chunk = snapshot_features(snapshots[start : start + chunk_size], dtype)
                detections.extend(model(chunk, positions).detection_sets())
    finally:
        model.train(training)
    return detections


def forward(model, geometry, snapshot):
    """Detections for a single snapshot of `geometry.element_count` values"""
    snapshot = np.asarray(snapshot, dtype=complex)
    if snapshot.ndim != 1 or snapshot.shape[0] != geometry.element_count:
        msg = (
            f'Snapshot has shape {snapshot.shape}, expected '
            f'({geometry.element_count},)'
        )
        raise ValueError(msg)
    return forward_batch(model, geometry, snapshot[None, :])[0]


class TransformerDetector:
    """Scene to detections through the transformer"""

    name = 'transformer'

    def __init__(self, model, geometry, chunk_size=4096) -> None:
        self.model = model
        self.geometry = geometry
        self.chunk_size = chunk_size

    def __call__(self, scene):
        return forward(self.model, self.geometry, scene.snapshot)

    def batch(self, scenes):
        if not scenes:
            return []
        snapshots = np.stack([scene.snapshot for scene in scenes])
        return forward_batch(self.model, self.geometry, snapshots, self.chunk_size)

    def describe(self):
        return {
            'method': self.name,
            'model_config': self.model.config.to_dict(),
            'parameters': parameter_count(self.model),
        }


def save_checkpoint(path, model, metadata=None, extra_tensors=None):
    """Write a checkpoint

    The container is the magic `AAETR01`, a little-endian uint32 header
    length, a JSON header (model config, tensor index and metadata) and the
    tensors as little-endian float32 in index order.

    Parameters
    ----------
    path : str | Path
        Checkpoint file
    model : AngleTransformer
        Model to store
    metadata : dict | None
        JSON serializable entries stored in the header
    extra_tensors : dict | None
        Additional named tensors, e.g. optimizer state

    Returns
    -------
    Path
        Checkpoint path
    """
    tensors = dict(model.state_dict())
    for name, tensor in (extra_tensors or {}).items():
        tensors[f'extra.{name}'] = tensor

    index, blobs, offset = [], [], 0
    for name, tensor in tensors.items():
        blob = tensor.detach().cpu().to(torch.float32).numpy().astype('<f4').tobytes()
        index.append(
            {
                'name': name,
                'shape': list(tensor.shape),
                'offset': offset,
                'nbytes': len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)

    header = {
        'format_version': CHECKPOINT_FORMAT_VERSION,
        'model_config': model.config.to_dict(),
        'tensors': index,
        'metadata': metadata or {},
    }
    header = json.dumps(header, sort_keys=True).encode('utf-8')
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + '.partial')
    tmp.write_bytes(
        CHECKPOINT_MAGIC + struct.pack('<I', len(header)) + header + b''.join(blobs)
    )
    tmp.replace(path)
    return path


def _corrupt(path, reason):
    msg = f'Corrupt checkpoint {path}: {reason}'
    return ValueError(msg)


def read_checkpoint(path):
    """Header and named float32 tensors of a checkpoint file"""
    data = Path(path).read_bytes()
    start = len(CHECKPOINT_MAGIC) + 4
    if not data.startswith(CHECKPOINT_MAGIC) or len(data) < start:
        raise _corrupt(path, 'bad magic')
    (length,) = struct.unpack('<I', data[len(CHECKPOINT_MAGIC) : start])
    try:
        header = json.loads(data[start : start + length].decode('utf-8'))
        entries = header['tensors']
    except (ValueError, KeyError, TypeError):
        raise _corrupt(path, 'unreadable header') from None

    body = data[start + length :]
    tensors = {}
    try:
        for entry in entries:
            name, shape, offset = entry['name'], entry['shape'], entry['offset']
            count = int(np.prod(shape, dtype=np.int64))
            if offset < 0 or offset + 4 * count > len(body):
                raise _corrupt(path, f'tensor {name} is truncated')
            values = np.frombuffer(body, dtype='<f4', count=count, offset=offset)
            tensors[name] = torch.from_numpy(values.astype(np.float32).reshape(shape))
    except (KeyError, TypeError):
        raise _corrupt(path, 'malformed tensor index') from None
    return header, tensors


def load_checkpoint(path, dtype=torch.float32):
    """Rebuild a model from a checkpoint

    Parameters
    ----------
    path : str | Path
        Checkpoint file
    dtype : torch.dtype
        Parameter dtype of the returned model

    Returns
    -------
    tuple
        (model, metadata, extra tensors)

    Raises
    ------
    ValueError
        When the file is not a readable checkpoint
    """
    header, tensors = read_checkpoint(path)
    try:
        config = ModelConfig(**header['model_config'])
    except (KeyError, TypeError, ValueError) as err:
        raise _corrupt(path, f'invalid model config ({err})') from None
    model = AngleTransformer(config)
    state = {k: v for k, v in tensors.items() if not k.startswith('extra.')}
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as err:
        raise _corrupt(path, str(err).splitlines()[0]) from None
    extra = {
        k[len('extra.') :]: v for k, v in tensors.items() if k.startswith('extra.')
    }
    return model.to(dtype), header.get('metadata', {}), extra
