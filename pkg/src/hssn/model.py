"""Siamese embedder with gram-matrix style heads on tapped backbone blocks.

The backbone is a stack of ``conv(k, same padding) -> relu [-> maxpool2]``
blocks. Every tapped block output feeds a style head
(``batchnorm -> gram -> flatten -> dense``, or gram before batchnorm when
``bn_position == "after_gram"``); the last block output is flattened into
the embedding layer. One parameter set serves every branch.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from .exceptions import ConfigurationError, DimensionError
from .tensor import (
    RunningStats,
    Tensor,
    batchnorm,
    conv2d,
    dense,
    flatten,
    gram_matrix,
    maxpool2,
    no_grad,
    relu,
    reshape,
)

CHECKPOINT_MAGIC = b"HSSN"
CHECKPOINT_VERSION = 1
BN_POSITIONS = ("before_gram", "after_gram")


@dataclass(frozen=True)
class Block:
    out_channels: int
    kernel: int = 3
    pool_after: bool = True


def _default_blocks():
    return (Block(16), Block(32), Block(64), Block(64))


@dataclass(frozen=True)
class ModelConfig:
    blocks: tuple = field(default_factory=_default_blocks)
    tap_indices: tuple = (0, 1, 2, 3)
    embedding_dim: int = 128
    style_out_dim: int = 128
    input_shape: tuple = (3, 64, 64)
    bn_position: str = "before_gram"
    # test-only switch used to show why the style head needs batch norm
    style_batchnorm: bool = True

    def __post_init__(self):
        blocks = tuple(b if isinstance(b, Block) else Block(**b) if isinstance(b, dict) else Block(*b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        object.__setattr__(self, "tap_indices", tuple(int(i) for i in self.tap_indices))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if not self.blocks:
            raise ConfigurationError("blocks: at least one block is required")
        for i, b in enumerate(self.blocks):
            if b.out_channels < 1:
                raise ConfigurationError(f"blocks[{i}].out_channels must be positive")
            if b.kernel < 1 or b.kernel % 2 == 0:
                raise ConfigurationError(f"blocks[{i}].kernel must be a positive odd int, got {b.kernel}")
        taps = self.tap_indices
        if not taps:
            raise ConfigurationError("tap_indices must be non-empty")
        if any(t < 0 or t >= len(self.blocks) for t in taps):
            raise ConfigurationError(f"tap_indices {list(taps)}: every tap index must be < number of blocks ({len(self.blocks)})")
        if any(a >= b for a, b in zip(taps, taps[1:])):
            raise ConfigurationError(f"tap_indices {list(taps)} must be strictly increasing")
        if self.embedding_dim < 1 or self.style_out_dim < 1:
            raise ConfigurationError("embedding_dim and style_out_dim must be positive")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigurationError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.bn_position not in BN_POSITIONS:
            raise ConfigurationError(f"bn_position must be one of {BN_POSITIONS}, got {self.bn_position!r}")
        _, h, w = self.input_shape
        for i, b in enumerate(self.blocks):
            if b.pool_after:
                if h % 2 or w % 2:
                    raise ConfigurationError(f"blocks[{i}] pools a {h}x{w} map; spatial dims must be even")
                h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ConfigurationError("spatial size after all pools must be >= 1")

    def block_shapes(self) -> list:
        """Output ``(C, H, W)`` of every block."""
        c, h, w = self.input_shape
        shapes = []
        for b in self.blocks:
            if b.pool_after:
                h, w = h // 2, w // 2
            shapes.append((b.out_channels, h, w))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["blocks"] = [asdict(b) for b in self.blocks]
        d["tap_indices"] = list(self.tap_indices)
        d["input_shape"] = list(self.input_shape)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class StyleAux(NamedTuple):
    style_vector: Tensor
    raw_gram: Tensor
    n_l: int
    m_l: int


@dataclass
class ForwardOutput:
    embedding: Tensor
    aux: list


def parameter_shapes(config: ModelConfig) -> "OrderedDict[str, tuple]":
    """Name -> shape of every trainable tensor, in initialisation order."""
    shapes = OrderedDict()
    c_in = config.input_shape[0]
    for i, b in enumerate(config.blocks):
        shapes[f"block{i}.conv.weight"] = (b.out_channels, c_in, b.kernel, b.kernel)
        shapes[f"block{i}.conv.bias"] = (b.out_channels,)
        c_in = b.out_channels
    block_shapes = config.block_shapes()
    for t in config.tap_indices:
        c = block_shapes[t][0]
        if config.style_batchnorm:
            shapes[f"style{t}.bn.gamma"] = (c,)
            shapes[f"style{t}.bn.beta"] = (c,)
        shapes[f"style{t}.dense.weight"] = (config.style_out_dim, c * c)
        shapes[f"style{t}.dense.bias"] = (config.style_out_dim,)
    c, h, w = block_shapes[-1]
    shapes["embed.weight"] = (config.embedding_dim, c * h * w)
    shapes["embed.bias"] = (config.embedding_dim,)
    return shapes


class Model:
    """Parameters and running statistics for one shared-weight embedder."""

    def __init__(self, config: ModelConfig, params: "OrderedDict[str, Tensor]", stats: dict):
        self.config = config
        self.params = params
        self.stats = stats
        expected = parameter_shapes(config)
        if list(expected) != list(params):
            raise ConfigurationError(f"parameter names {list(params)} do not match config {list(expected)}")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise ConfigurationError(f"parameter {name}: shape {params[name].shape} != expected {shape}")

    def parameters(self) -> list:
        return list(self.params.values())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def forward(self, images, mode: str = "train") -> list:
        return forward(self, images, mode)

    def embed(self, images) -> np.ndarray:
        return embed(self, images)


def build_model(config: ModelConfig, seed: int = 0) -> Model:
    """Initialise a model deterministically from ``seed``.

    Conv and dense weights are He-uniform (``U(-sqrt(6/fan_in), +)``); biases
    and batch-norm shifts start at zero, scales at one.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    block_shapes = config.block_shapes()
    stats = {t: RunningStats.fresh(block_shapes[t][0]) for t in config.tap_indices} if config.style_batchnorm else {}
    return Model(config, params, stats)


def _as_batch(model: Model, images) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim == 3:
        x = reshape(x, (1,) + x.shape)
    if x.data.ndim != 4 or tuple(x.shape[1:]) != model.config.input_shape:
        raise DimensionError(f"image batch {x.shape} does not match input_shape {model.config.input_shape}")
    return x


def _style_head(model: Model, t: int, feats: Tensor, mode: str):
    p = model.params
    B, C, H, W = feats.shape
    cfg = model.config
    if cfg.style_batchnorm and cfg.bn_position == "before_gram":
        feats = batchnorm(feats, p[f"style{t}.bn.gamma"], p[f"style{t}.bn.beta"], model.stats[t], mode)
    gram = gram_matrix(reshape(feats, (B, C, H * W)))
    normed = gram
    if cfg.style_batchnorm and cfg.bn_position == "after_gram":
        normed = batchnorm(gram, p[f"style{t}.bn.gamma"], p[f"style{t}.bn.beta"], model.stats[t], mode)
    style = dense(flatten(normed, 1), p[f"style{t}.dense.weight"], p[f"style{t}.dense.bias"])
    return style, gram, C, H * W


def forward_batch(model: Model, images, mode: str = "train"):
    """Batched forward pass.

    Returns ``(embeddings [B, E], [(style [B, S], gram [B, C, C], n_l, m_l), ...])``.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = _as_batch(model, images)
    p = model.params
    taps = set(model.config.tap_indices)
    aux = []
    for i, b in enumerate(model.config.blocks):
        x = relu(conv2d(x, p[f"block{i}.conv.weight"], p[f"block{i}.conv.bias"], 1, b.kernel // 2))
        if b.pool_after:
            x = maxpool2(x)
        if i in taps:
            aux.append(_style_head(model, i, x, mode))
    emb = dense(flatten(x, 1), p["embed.weight"], p["embed.bias"])
    return emb, aux


def forward(model: Model, images, mode: str = "train") -> list:
    """Per-row :class:`ForwardOutput` for an image batch ``[B, C, H, W]``."""
    emb, aux = forward_batch(model, images, mode)
    outs = []
    for r in range(emb.shape[0]):
        row_aux = [StyleAux(style[r], gram[r], n, m) for style, gram, n, m in aux]
        outs.append(ForwardOutput(emb[r], row_aux))
    return outs


def embed(model: Model, images) -> np.ndarray:
    """Eval-mode embeddings ``[B, embedding_dim]``; nothing is recorded."""
    with no_grad():
        emb, _ = forward_batch(model, images, "eval")
    return emb.data.copy()


# checkpoints -------------------------------------------------------------------


def _state_items(model: Model):
    for name, t in model.params.items():
        yield name, t.data
    for tap, st in model.stats.items():
        yield f"style{tap}.bn.running_mean", st.mean
        yield f"style{tap}.bn.running_var", st.var


def save_checkpoint(model: Model, path) -> Path:
    """Write parameters, running stats and the config in the ``HSSN`` binary layout.

    Layout (little-endian): ``b"HSSN"``, u16 version, u32 config length +
    canonical config JSON, u32 entry count, then per entry a u32-prefixed
    UTF-8 name, u32 rank, u32 dims and float32 data.
    """
    path = Path(path)
    cfg = model.config.to_json().encode("utf-8")
    items = list(_state_items(model))
    chunks = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION), struct.pack("<I", len(cfg)), cfg]
    chunks.append(struct.pack("<I", len(items)))
    for name, arr in items:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path.write_bytes(b"".join(chunks))
    return path


def read_checkpoint(path) -> tuple:
    """Decode a checkpoint into ``(config_dict, OrderedDict[name, ndarray])``."""
    buf = Path(path).read_bytes()
    if buf[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not an HSSN checkpoint")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    off = 6
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    config = json.loads(buf[off : off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = OrderedDict()
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{rank}I", buf, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64))
        tensors[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
    if off != len(buf):
        raise ConfigurationError(f"{path}: {len(buf) - off} trailing bytes")
    return config, tensors


def load_checkpoint(path, config: Optional[ModelConfig] = None) -> Model:
    """Rebuild a :class:`Model` from ``path``.

    When ``config`` is given the stored tensors must fit it; any conflict is
    reported as a :class:`ConfigurationError` naming the tensor and shapes.
    """
    stored_cfg, tensors = read_checkpoint(path)
    config = config or ModelConfig.from_dict(stored_cfg)
    params = OrderedDict()
    for name, shape in parameter_shapes(config).items():
        if name not in tensors:
            raise ConfigurationError(f"checkpoint {path} lacks parameter {name} {shape}")
        if tensors[name].shape != shape:
            raise ConfigurationError(
                f"shape conflict for {name}: checkpoint has {tensors[name].shape}, config expects {shape}"
            )
        params[name] = Tensor(tensors[name], requires_grad=True, name=name)
    stats = {}
    block_shapes = config.block_shapes()
    if config.style_batchnorm:
        for t in config.tap_indices:
            c = block_shapes[t][0]
            mean = tensors.get(f"style{t}.bn.running_mean")
            var = tensors.get(f"style{t}.bn.running_var")
            if mean is None or var is None or mean.shape != (c,) or var.shape != (c,):
                raise ConfigurationError(f"checkpoint {path}: running stats for tap {t} missing or not ({c},)")
            stats[t] = RunningStats(mean.copy(), var.copy())
    return Model(config, params, stats)
