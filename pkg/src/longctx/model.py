"""Decoder-only transformer: configuration, seeded build, forward, checkpoints.

The block layout is pre-norm RMS: attention and MLP each read a normalized
copy of the residual stream and add their projection back.  All projections
go through the order-pinned ``matmul``, so per-row results are independent of
how the sequence is sharded across workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError, ConfigError, DimensionError, LayoutError
from .kernels import (
    RopeConfig,
    apply_rope,
    attend_masked,
    causal_mask,
    gelu,
    matmul,
    rms_norm,
)

PAD_TOKEN = 0
EOS_TOKEN = 1
BOS_TOKEN = 2

CHECKPOINT_MAGIC = b"LVTA"
CHECKPOINT_VERSION = 1

# MLP hidden width is always this multiple of d_model; it is not configurable.
FFN_MULT = 4


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 32
    vocab_size: int = 512
    rope_base: float = 1_000_000.0
    seed: int = 0

    def __post_init__(self):
        for name in ("d_model", "n_layers", "n_heads", "head_dim", "vocab_size"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model != self.n_heads * self.head_dim:
            raise ConfigError(
                f"d_model {self.d_model} != n_heads {self.n_heads} * head_dim {self.head_dim}"
            )
        if self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be even for rotary pairs, got {self.head_dim}")
        # pad, eos, bos, and at least one content token
        if self.vocab_size < 4:
            raise ConfigError(f"vocab_size must be at least 4, got {self.vocab_size}")

    @property
    def d_ff(self) -> int:
        return FFN_MULT * self.d_model

    @property
    def rope(self) -> RopeConfig:
        return RopeConfig(head_dim=self.head_dim, base=self.rope_base)

    def param_count(self) -> int:
        d, v = self.d_model, self.vocab_size
        per_layer = 4 * d * d + 2 * d * self.d_ff + 2 * d
        return 2 * v * d + self.n_layers * per_layer + d


@dataclass
class LayerWeights:
    attn_norm: np.ndarray  # (d_model,)
    wq: np.ndarray         # (d_model, d_model)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    mlp_norm: np.ndarray   # (d_model,)
    w1: np.ndarray         # (d_model, d_ff)
    w2: np.ndarray         # (d_ff, d_model)


@dataclass
class Model:
    config: ModelConfig
    embed: np.ndarray       # (vocab_size, d_model)
    layers: list[LayerWeights] = field(default_factory=list)
    final_norm: np.ndarray = None
    unembed: np.ndarray = None  # (d_model, vocab_size)

    def param_count(self) -> int:
        total = self.embed.size + self.final_norm.size + self.unembed.size
        for lw in self.layers:
            total += sum(
                getattr(lw, f).size
                for f in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2")
            )
        return total


def build_model(config: ModelConfig) -> Model:
    """Materialize weights from the config seed; same seed, same bits."""
    rng = np.random.default_rng(config.seed)

    def draw(*shape):
        return rng.uniform(-0.02, 0.02, size=shape).astype(np.float32)

    d, v = config.d_model, config.vocab_size
    embed = draw(v, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(
            LayerWeights(
                attn_norm=np.ones(d, dtype=np.float32),
                wq=draw(d, d),
                wk=draw(d, d),
                wv=draw(d, d),
                wo=draw(d, d),
                mlp_norm=np.ones(d, dtype=np.float32),
                w1=draw(d, config.d_ff),
                w2=draw(config.d_ff, d),
            )
        )
    return Model(
        config=config,
        embed=embed,
        layers=layers,
        final_norm=np.ones(d, dtype=np.float32),
        unembed=draw(d, v),
    )


def embed_tokens(model: Model, tokens) -> np.ndarray:
    """Look up embedding rows; ids outside the vocabulary are rejected."""
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1:
        raise DimensionError(f"token ids must be 1-d, got shape {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= model.config.vocab_size):
        bad = ids[(ids < 0) | (ids >= model.config.vocab_size)][0]
        raise IndexError(f"token id {bad} outside vocabulary of {model.config.vocab_size}")
    return model.embed[ids]


def split_heads(x: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    """(tokens, d_model) -> (heads, tokens, head_dim)."""
    return x.reshape(x.shape[0], n_heads, head_dim).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    """(heads, tokens, head_dim) -> (tokens, d_model)."""
    return x.transpose(1, 0, 2).reshape(x.shape[1], x.shape[0] * x.shape[2])


def project_qkv(model: Model, layer_index: int, x: np.ndarray, positions) -> tuple:
    """Normalized q/k/v projections for one layer, heads split, rotary applied."""
    cfg = model.config
    lw = model.layers[layer_index]
    normed = rms_norm(x, lw.attn_norm)
    q = split_heads(matmul(normed, lw.wq), cfg.n_heads, cfg.head_dim)
    k = split_heads(matmul(normed, lw.wk), cfg.n_heads, cfg.head_dim)
    v = split_heads(matmul(normed, lw.wv), cfg.n_heads, cfg.head_dim)
    rope = cfg.rope
    return apply_rope(q, positions, rope), apply_rope(k, positions, rope), v


def finish_layer(model: Model, layer_index: int, x: np.ndarray, context: np.ndarray) -> np.ndarray:
    """Attention output projection, residual add, and the MLP half-block."""
    lw = model.layers[layer_index]
    x = x + matmul(merge_heads(context), lw.wo)
    hidden = matmul(rms_norm(x, lw.mlp_norm), lw.w1)
    return x + matmul(gelu(hidden), lw.w2)


def forward(model: Model, embedded, mask, position_ids) -> np.ndarray:
    """Single-device forward pass over an embedded sequence.

    ``mask`` is a {0,1} array over (query, key); every row must allow at
    least one key.  Returns final-norm hidden states, one row per token.
    """
    x = np.asarray(embedded, dtype=np.float32)
    if x.ndim != 2 or x.shape[1] != model.config.d_model:
        raise DimensionError(f"embedded shape {x.shape} does not match d_model")
    n = x.shape[0]
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (n, n):
        raise DimensionError(f"mask shape {mask.shape} does not cover {n} tokens")
    positions = np.asarray(position_ids)
    if positions.shape != (n,):
        raise DimensionError(f"position_ids shape {positions.shape} does not cover {n} tokens")
    for li in range(model.config.n_layers):
        q, k, v = project_qkv(model, li, x, positions)
        context = attend_masked(q, k, v, mask)
        x = finish_layer(model, li, x, context)
    return rms_norm(x, model.final_norm)


def forward_tokens(model: Model, tokens, mask=None, position_ids=None) -> np.ndarray:
    """Forward over raw token ids with a causal default mask."""
    ids = np.asarray(tokens, dtype=np.int64)
    if mask is None:
        mask = causal_mask(ids.shape[0])
    if position_ids is None:
        position_ids = np.arange(ids.shape[0])
    return forward(model, embed_tokens(model, ids), mask, position_ids)


def embed_multimodal(model: Model, tokens, visuals) -> np.ndarray:
    """Splice visual feature blocks into the text embedding sequence.

    ``visuals`` is a sequence of (offset, features) pairs; each block is
    inserted before text position ``offset``.  Offsets must be non-decreasing
    and within the text length, features must match d_model.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    text = embed_tokens(model, ids)
    parts = []
    prev = 0
    for offset, features in visuals:
        feats = np.asarray(features, dtype=np.float32)
        if feats.ndim != 2 or feats.shape[1] != model.config.d_model:
            raise DimensionError(f"visual feature shape {feats.shape} does not match d_model")
        if offset < prev or offset > ids.shape[0]:
            raise LayoutError(
                f"visual offset {offset} out of order for text of length {ids.shape[0]}"
            )
        parts.append(text[prev:offset])
        parts.append(feats)
        prev = offset
    parts.append(text[prev:])
    return np.concatenate(parts, axis=0)


_CONFIG_FIELDS = ("d_model", "n_layers", "n_heads", "head_dim", "vocab_size", "rope_base", "seed")


def _tensor_items(model: Model):
    yield "embed", model.embed
    for i, lw in enumerate(model.layers):
        for name in ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2"):
            yield f"layer{i}.{name}", getattr(lw, name)
    yield "final_norm", model.final_norm
    yield "unembed", model.unembed


def save_checkpoint(model: Model, path) -> None:
    """Write the binary checkpoint: magic, version, config block, tensors.

    All integers and floats are little-endian; tensor payloads are raw
    float32.  Loading the file back reproduces the model bit for bit.
    """
    cfg = model.config
    if not float(cfg.rope_base).is_integer():
        raise CheckpointError(f"rope_base {cfg.rope_base} is not storable as an integer")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(_CONFIG_FIELDS)))
        for name in _CONFIG_FIELDS:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<Q", int(getattr(cfg, name))))
        for name, arr in _tensor_items(model):
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<Q", extent))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError("checkpoint truncated")
        chunk = self.data[self.offset : self.offset + n]
        self.offset += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    @property
    def exhausted(self) -> bool:
        return self.offset == len(self.data)


def load_checkpoint(path) -> Model:
    """Read a checkpoint written by ``save_checkpoint``; strict validation."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())
    if reader.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    version = reader.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    fields = {}
    for _ in range(reader.u32()):
        name = reader.take(reader.u32()).decode("utf-8")
        fields[name] = reader.u64()
    if set(fields) != set(_CONFIG_FIELDS):
        raise CheckpointError(f"config fields {sorted(fields)} do not match expected set")
    fields["rope_base"] = float(fields["rope_base"])
    config = ModelConfig(**fields)
    tensors = {}
    while not reader.exhausted:
        name = reader.take(reader.u32()).decode("utf-8")
        rank = reader.u32()
        shape = tuple(reader.u64() for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        payload = reader.take(count * 4)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(shape).copy()
    expected = dict(_tensor_items(build_model(config)))
    if set(tensors) != set(expected):
        raise CheckpointError("tensor names do not match the model layout")
    for name, arr in tensors.items():
        if arr.shape != expected[name].shape:
            raise CheckpointError(
                f"tensor {name} has shape {arr.shape}, expected {expected[name].shape}"
            )
    layers = [
        LayerWeights(**{f: tensors[f"layer{i}.{f}"] for f in
                        ("attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w1", "w2")})
        for i in range(config.n_layers)
    ]
    return Model(
        config=config,
        embed=tensors["embed"],
        layers=layers,
        final_norm=tensors["final_norm"],
        unembed=tensors["unembed"],
    )
