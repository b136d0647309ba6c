"""Transformer-encoder CTC sequence model.

A linear feature frontend with sinusoidal positions feeds a stack of
post-norm transformer encoder blocks; a single fully connected layer on top
produces per-frame logits over the vocabulary (index 0 is the CTC blank).
The output of every block can be tapped for regularization, and
:func:`resume_from_tap` continues a forward pass from any tapped embedding.

Checkpoint layout (all little-endian)::

    magic      4 bytes   b"FRSM"
    version    u32       CHECKPOINT_VERSION
    n_blocks, d_model, n_heads, d_ff, vocab_size, input_dim   6 x u32
    n_taps     u32, followed by n_taps x u32 tap positions
    n_params   u64
    params     n_params x f64, canonical flattening order
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Optional, Union

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, DataError
from .numerics import Tensor

CHECKPOINT_MAGIC = b"FRSM"
CHECKPOINT_VERSION = 1
BLANK = 0
PROJECTION_STD = 0.02
FRONTEND_PREFIX = "frontend."


@dataclass(frozen=True)
class ModelConfig:
    """Shape of the encoder; parameter count is a pure function of it."""

    n_blocks: int = 4
    d_model: int = 32
    n_heads: int = 2
    d_ff: int = 64
    vocab_size: int = 12
    input_dim: int = 16
    tap_positions: tuple[int, ...] = (1, 2, 3, 4)

    def __post_init__(self) -> None:
        for name in ("n_blocks", "d_model", "n_heads", "d_ff", "input_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.vocab_size < 2:
            raise ConfigurationError(f"vocab_size must include blank and >= 1 symbol, got {self.vocab_size}")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        taps = tuple(sorted(set(int(t) for t in self.tap_positions)))
        bad = [t for t in taps if not 1 <= t <= self.n_blocks]
        if bad:
            raise ConfigurationError(f"tap_positions {bad} outside 1..{self.n_blocks}")
        object.__setattr__(self, "tap_positions", taps)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


def parameter_shapes(config: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Canonical (name, shape) list; its order is the flattening order."""
    d, f = config.d_model, config.d_ff
    shapes: list[tuple[str, tuple[int, ...]]] = [
        ("frontend.weight", (config.input_dim, d)),
        ("frontend.bias", (d,)),
    ]
    for b in range(1, config.n_blocks + 1):
        p = f"blocks.{b}"
        for proj in ("q", "k", "v", "o"):
            shapes += [(f"{p}.attn.{proj}.weight", (d, d)), (f"{p}.attn.{proj}.bias", (d,))]
        shapes += [
            (f"{p}.ln1.gain", (d,)),
            (f"{p}.ln1.bias", (d,)),
            (f"{p}.ffn.w1", (d, f)),
            (f"{p}.ffn.b1", (f,)),
            (f"{p}.ffn.w2", (f, d)),
            (f"{p}.ffn.b2", (d,)),
            (f"{p}.ln2.gain", (d,)),
            (f"{p}.ln2.bias", (d,)),
        ]
    shapes += [("head.weight", (d, config.vocab_size)), ("head.bias", (config.vocab_size,))]
    return shapes


def parameter_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in parameter_shapes(config))


class ModelParams:
    """Named parameter arrays with a stable flat-vector view.

    Instances are treated as immutable values: updates return new objects.
    """

    def __init__(self, config: ModelConfig, tensors: Mapping[str, np.ndarray]) -> None:
        expected = parameter_shapes(config)
        if set(tensors) != {name for name, _ in expected}:
            missing = sorted({n for n, _ in expected} - set(tensors))
            extra = sorted(set(tensors) - {n for n, _ in expected})
            raise ConfigurationError(f"parameter names mismatch: missing={missing} extra={extra}")
        self.config = config
        self._tensors: OrderedDict[str, np.ndarray] = OrderedDict()
        for name, shape in expected:
            value = np.array(tensors[name], dtype=np.float64)
            if value.shape != shape:
                raise ConfigurationError(f"{name}: expected shape {shape}, got {value.shape}")
            self._tensors[name] = value

    def __getitem__(self, name: str) -> np.ndarray:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def items(self) -> Iterable[tuple[str, np.ndarray]]:
        return self._tensors.items()

    @property
    def size(self) -> int:
        return sum(v.size for v in self._tensors.values())

    def flatten(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self._tensors.values()])

    @classmethod
    def unflatten(cls, config: ModelConfig, vector: np.ndarray) -> "ModelParams":
        vector = np.asarray(vector, dtype=np.float64)
        if vector.ndim != 1 or vector.size != parameter_count(config):
            raise ConfigurationError(
                f"flat vector of length {vector.size} does not match "
                f"parameter count {parameter_count(config)}"
            )
        tensors: dict[str, np.ndarray] = {}
        offset = 0
        for name, shape in parameter_shapes(config):
            n = int(np.prod(shape))
            tensors[name] = vector[offset : offset + n].reshape(shape)
            offset += n
        return cls(config, tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, self._tensors)

    def replace(self, **updates: np.ndarray) -> "ModelParams":
        """Return a copy with some named tensors swapped out."""
        merged = dict(self._tensors)
        merged.update(updates)
        return ModelParams(self.config, merged)

    def as_leaves(self) -> dict[str, Tensor]:
        """Differentiable graph leaves, one per parameter tensor."""
        return {name: Tensor(value.copy(), requires_grad=True) for name, value in self.items()}

    def as_constants(self) -> dict[str, Tensor]:
        """Frozen graph leaves; no gradient flows into them."""
        return {name: Tensor(value) for name, value in self.items()}

    def sgd_step(self, grads: Mapping[str, np.ndarray], lr: float) -> "ModelParams":
        return ModelParams(
            self.config, {name: value - lr * grads[name] for name, value in self.items()}
        )

    def allclose(self, other: "ModelParams", atol: float = 0.0) -> bool:
        return self.config == other.config and bool(
            np.all(np.abs(self.flatten() - other.flatten()) <= atol)
        )


Weights = Union[ModelParams, Mapping[str, Tensor]]


@dataclass
class ForwardTrace:
    """Per-block embeddings for the requested taps plus head outputs."""

    embeddings: dict[int, Tensor]
    logits: Tensor
    log_probs: Tensor
    probs: Optional[Tensor] = field(default=None)

    @property
    def n_frames(self) -> int:
        return self.logits.shape[0]


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """Scaled Gaussian init: projections N(0, 0.02^2), biases 0, LN gain 1."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in parameter_shapes(config):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gain":
            tensors[name] = np.ones(shape)
        elif len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = rng.normal(0.0, PROJECTION_STD, size=shape)
    return ModelParams(config, tensors)


def _as_weights(params: Weights) -> Mapping[str, Tensor]:
    if isinstance(params, ModelParams):
        return params.as_constants()
    return params


def _config_of(params: Weights, config: Optional[ModelConfig]) -> ModelConfig:
    if isinstance(params, ModelParams):
        return params.config
    if config is None:
        raise ConfigurationError("a ModelConfig is required when passing raw graph leaves")
    return config


def sinusoidal_positions(n_frames: int, d_model: int) -> np.ndarray:
    positions = np.arange(n_frames)[:, None]
    rates = np.exp(-math.log(10000.0) * (np.arange(0, d_model, 2) / d_model))
    table = np.zeros((n_frames, d_model))
    table[:, 0::2] = np.sin(positions * rates)
    table[:, 1::2] = np.cos(positions * rates[: d_model // 2])
    return table


def _attention(w: Mapping[str, Tensor], prefix: str, x: Tensor, config: ModelConfig) -> Tensor:
    q = x @ w[f"{prefix}.attn.q.weight"] + w[f"{prefix}.attn.q.bias"]
    k = x @ w[f"{prefix}.attn.k.weight"] + w[f"{prefix}.attn.k.bias"]
    v = x @ w[f"{prefix}.attn.v.weight"] + w[f"{prefix}.attn.v.bias"]
    dh = config.head_dim
    scale = 1.0 / math.sqrt(dh)
    heads = []
    for h in range(config.n_heads):
        cols = (slice(None), slice(h * dh, (h + 1) * dh))
        scores = (q[cols] @ k[cols].T) * scale
        heads.append(nx.softmax(scores, axis=-1) @ v[cols])
    merged = heads[0] if len(heads) == 1 else nx.concat(heads, axis=1)
    return merged @ w[f"{prefix}.attn.o.weight"] + w[f"{prefix}.attn.o.bias"]


def _block(w: Mapping[str, Tensor], index: int, x: Tensor, config: ModelConfig) -> Tensor:
    p = f"blocks.{index}"
    x = nx.layer_norm(x + _attention(w, p, x, config), w[f"{p}.ln1.gain"], w[f"{p}.ln1.bias"])
    hidden = nx.gelu(x @ w[f"{p}.ffn.w1"] + w[f"{p}.ffn.b1"])
    ffn = hidden @ w[f"{p}.ffn.w2"] + w[f"{p}.ffn.b2"]
    return nx.layer_norm(x + ffn, w[f"{p}.ln2.gain"], w[f"{p}.ln2.bias"])


def _head(w: Mapping[str, Tensor], x: Tensor) -> Tensor:
    return x @ w["head.weight"] + w["head.bias"]


def _check_taps(taps: Iterable[int], config: ModelConfig) -> frozenset[int]:
    taps = frozenset(int(t) for t in taps)
    bad = sorted(t for t in taps if not 1 <= t <= config.n_blocks)
    if bad:
        raise ConfigurationError(f"tap positions {bad} outside 1..{config.n_blocks}")
    return taps


def forward(
    params: Weights,
    features: Union[np.ndarray, Tensor],
    taps: Iterable[int] = (),
    config: Optional[ModelConfig] = None,
) -> ForwardTrace:
    """Run the encoder on one utterance of shape (frames, input_dim).

    Args:
        params: Parameter values, or graph leaves from ``as_leaves()`` when
            gradients are needed (then ``config`` must be given).
        features: Input frames.
        taps: Block positions (1-based) whose outputs are recorded.
        config: Model shape, required only for raw graph leaves.

    Raises:
        DataError: If the utterance has no frames.
        ConfigurationError: On feature width or tap mismatch.
    """
    config = _config_of(params, config)
    w = _as_weights(params)
    taps = _check_taps(taps, config)
    x = nx.as_tensor(features)
    if x.data.ndim != 2 or x.shape[0] == 0:
        raise DataError(f"forward needs a non-empty (frames, features) matrix, got {x.shape}")
    if x.shape[1] != config.input_dim:
        raise ConfigurationError(
            f"feature width {x.shape[1]} does not match input_dim {config.input_dim}"
        )

    h = x @ w["frontend.weight"] + w["frontend.bias"]
    h = h + sinusoidal_positions(x.shape[0], config.d_model)
    embeddings: dict[int, Tensor] = {}
    for b in range(1, config.n_blocks + 1):
        h = _block(w, b, h, config)
        if b in taps:
            embeddings[b] = h
    logits = _head(w, h)
    return ForwardTrace(embeddings=embeddings, logits=logits, log_probs=nx.log_softmax(logits))


def resume_from_tap(
    params: Weights,
    embedding: Union[np.ndarray, Tensor],
    position: int,
    config: Optional[ModelConfig] = None,
) -> Tensor:
    """Run blocks ``position+1..L`` and the head on a tapped embedding.

    Returns the logits; for any input the result equals the full forward
    pass logits bitwise when fed that pass's embedding at ``position``.
    """
    config = _config_of(params, config)
    w = _as_weights(params)
    if not 1 <= position <= config.n_blocks:
        raise ConfigurationError(f"tap position {position} outside 1..{config.n_blocks}")
    h = nx.as_tensor(embedding)
    if h.data.ndim != 2 or h.shape[1] != config.d_model:
        raise ConfigurationError(
            f"embedding shape {h.shape} does not match d_model {config.d_model}"
        )
    for b in range(position + 1, config.n_blocks + 1):
        h = _block(w, b, h, config)
    return _head(w, h)


def save_checkpoint(params: ModelParams, path: Union[str, Path]) -> None:
    """Write ``params`` in the FRSM binary format."""
    c = params.config
    header = CHECKPOINT_MAGIC + struct.pack(
        "<7I", CHECKPOINT_VERSION, c.n_blocks, c.d_model, c.n_heads, c.d_ff, c.vocab_size, c.input_dim
    )
    header += struct.pack(f"<I{len(c.tap_positions)}I", len(c.tap_positions), *c.tap_positions)
    vector = params.flatten()
    header += struct.pack("<Q", vector.size)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(header)
        f.write(vector.astype("<f8").tobytes())


def load_checkpoint(path: Union[str, Path]) -> ModelParams:
    """Read a checkpoint written by :func:`save_checkpoint`."""
    blob = Path(path).read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: not an FRSM checkpoint")
    offset = 4
    version, n_blocks, d_model, n_heads, d_ff, vocab, input_dim = struct.unpack_from("<7I", blob, offset)
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    offset += 28
    (n_taps,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    taps = struct.unpack_from(f"<{n_taps}I", blob, offset)
    offset += 4 * n_taps
    (n_params,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    config = ModelConfig(
        n_blocks=n_blocks,
        d_model=d_model,
        n_heads=n_heads,
        d_ff=d_ff,
        vocab_size=vocab,
        input_dim=input_dim,
        tap_positions=tuple(taps),
    )
    vector = np.frombuffer(blob, dtype="<f8", count=n_params, offset=offset)
    return ModelParams.unflatten(config, vector.astype(np.float64))
