"""Deterministic float32 tensor kernels.

Arithmetic order is pinned wherever a bitwise contract depends on it:
``matmul`` walks the inner dimension sequentially, so its result matches a
scalar triple loop bit for bit and does not change when callers batch rows.
Attention runs through an online-softmax accumulator whose merge step is
exact for the dominant side, letting blocked and distributed schedules agree
with the single-pass reference within accumulation-order rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateRowError, DimensionError

# Pre-softmax replacement value for disallowed scores.  Large enough that
# exp(SCORE_FLOOR - max) underflows to exactly zero whenever any score in the
# row is allowed.
SCORE_FLOOR = np.float32(-1e9)

# Default sub-block extents for blocked attention.  Results are tolerance-level
# independent of these; they only bound transient memory.
Q_BLOCK = 2048
KV_BLOCK = 4096


def _as_f32(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float32)


def matmul(a, b) -> np.ndarray:
    """Multiply two matrices by accumulating rank-1 updates in index order.

    The inner dimension is walked sequentially, so the result is bitwise
    identical to a scalar triple loop and independent of how callers batch
    rows of ``a``.
    """
    a = _as_f32(a)
    b = _as_f32(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} vs {b.shape}")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float32)
    tmp = np.empty_like(out)
    for t in range(a.shape[1]):
        np.multiply(a[:, t, None], b[t, None, :], out=tmp)
        out += tmp
    return out


def softmax_rows(x, mask=None) -> np.ndarray:
    """Row-wise softmax with an optional {0,1} mask applied before normalizing.

    Masked-out entries are replaced by ``SCORE_FLOOR`` before the shift and
    exponentiation, then forced to exactly zero, so a padded row's surviving
    entries match the unpadded row bit for bit.  Reductions run in float64 and
    the result is cast back to float32.
    """
    x = _as_f32(x)
    squeeze = x.ndim == 1
    rows = np.atleast_2d(x)
    allowed = None
    if mask is not None:
        m = np.atleast_2d(np.asarray(mask))
        if m.shape != rows.shape:
            raise DimensionError(f"mask shape {m.shape} does not match rows {rows.shape}")
        allowed = m.astype(bool)
        if not allowed.any(axis=1).all():
            raise DegenerateRowError("softmax row with every entry masked out")
    scores = rows.astype(np.float64)
    if allowed is not None:
        scores = np.where(allowed, scores, float(SCORE_FLOOR))
    shifted = scores - scores.max(axis=1, keepdims=True)
    weights = np.exp(shifted)
    if allowed is not None:
        weights = np.where(allowed, weights, 0.0)
    out = (weights / weights.sum(axis=1, keepdims=True)).astype(np.float32)
    return out[0] if squeeze else out


def rms_norm(x, weight, eps: float = 1e-6) -> np.ndarray:
    """Root-mean-square normalization over the last axis, scaled by ``weight``."""
    x = _as_f32(x)
    w = _as_f32(weight)
    if w.ndim != 1 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"weight shape {w.shape} does not match features {x.shape}")
    mean_sq = np.mean(np.square(x, dtype=np.float64), axis=-1, keepdims=True)
    scale = (1.0 / np.sqrt(mean_sq + eps)).astype(np.float32)
    return x * scale * w


_GELU_COEFF = np.float32(math.sqrt(2.0 / math.pi))
_GELU_CUBIC = np.float32(0.044715)


def gelu(x) -> np.ndarray:
    """GELU activation, tanh approximation."""
    x = _as_f32(x)
    inner = _GELU_COEFF * (x + _GELU_CUBIC * x * x * x)
    return np.float32(0.5) * x * (np.float32(1.0) + np.tanh(inner))


@dataclass(frozen=True)
class RopeConfig:
    """Rotary embedding geometry: pair count comes from ``head_dim``."""

    head_dim: int
    base: float = 1_000_000.0

    def __post_init__(self):
        if self.head_dim < 2 or self.head_dim % 2 != 0:
            raise ConfigError(f"head_dim must be a positive even number, got {self.head_dim}")
        if self.base <= 0:
            raise ConfigError(f"rope base must be positive, got {self.base}")


def rope_angles(config: RopeConfig, positions) -> np.ndarray:
    """Rotation angle per (position, pair): ``pos * base**(-2i/head_dim)``.

    Returned in float64; pair index i covers features (2i, 2i+1).
    """
    pair = np.arange(config.head_dim // 2, dtype=np.float64)
    inv_freq = config.base ** (-2.0 * pair / config.head_dim)
    pos = np.asarray(positions, dtype=np.float64)
    return pos[..., None] * inv_freq


def apply_rope(x, positions, config: RopeConfig) -> np.ndarray:
    """Rotate adjacent feature pairs (2i, 2i+1) by position-dependent angles.

    Angles are tabulated in float64; cos/sin are cast to float32 before the
    rotation, so position zero is a bitwise identity.
    """
    x = _as_f32(x)
    if x.shape[-1] != config.head_dim:
        raise DimensionError(f"feature size {x.shape[-1]} != head_dim {config.head_dim}")
    positions = np.asarray(positions)
    if positions.ndim != 1 or positions.shape[0] != x.shape[-2]:
        raise DimensionError(f"positions shape {positions.shape} does not match tokens {x.shape}")
    angles = rope_angles(config, positions)
    cos = np.cos(angles).astype(np.float32)
    sin = np.sin(angles).astype(np.float32)
    even = x[..., 0::2]
    odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


@dataclass
class SoftmaxAccumulator:
    """Running state of an online softmax over key/value blocks.

    ``partial_out`` is unnormalized; dividing by ``running_denom`` after the
    final merge yields the attention output.
    """

    partial_out: np.ndarray    # (..., queries, value_dim)
    running_max: np.ndarray    # (..., queries)
    running_denom: np.ndarray  # (..., queries)


def empty_accumulator(shape) -> SoftmaxAccumulator:
    """Identity accumulator for an output of the given shape."""
    shape = tuple(int(s) for s in shape)
    if len(shape) < 2:
        raise DimensionError(f"accumulator shape needs at least (queries, dim), got {shape}")
    return SoftmaxAccumulator(
        partial_out=np.zeros(shape, dtype=np.float32),
        running_max=np.full(shape[:-1], SCORE_FLOOR, dtype=np.float32),
        running_denom=np.zeros(shape[:-1], dtype=np.float32),
    )


def merge_accumulators(a: SoftmaxAccumulator, b: SoftmaxAccumulator) -> SoftmaxAccumulator:
    """Combine accumulators over disjoint key blocks for the same queries.

    Both sides are rescaled to the joint running max; the empty accumulator
    is an exact identity and the operation commutes bitwise.
    """
    if a.partial_out.shape != b.partial_out.shape:
        raise DimensionError(
            f"accumulator shapes differ: {a.partial_out.shape} vs {b.partial_out.shape}"
        )
    new_max = np.maximum(a.running_max, b.running_max)
    scale_a = np.exp(a.running_max - new_max)
    scale_b = np.exp(b.running_max - new_max)
    return SoftmaxAccumulator(
        partial_out=a.partial_out * scale_a[..., None] + b.partial_out * scale_b[..., None],
        running_max=new_max,
        running_denom=a.running_denom * scale_a + b.running_denom * scale_b,
    )


def _default_scale(head_dim: int) -> np.float32:
    return np.float32(1.0 / math.sqrt(head_dim))


def attend_block(q, k, v, allowed, scale=None) -> SoftmaxAccumulator:
    """Attention over one key/value block, returned as an accumulator.

    ``allowed`` is a {0,1} mask over (query, key) pairs, broadcast across any
    leading batch axes.  Disallowed entries are floored before the block max
    and zeroed after exponentiation, so they contribute exactly nothing.
    """
    q = _as_f32(q)
    k = _as_f32(k)
    v = _as_f32(v)
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"query/key feature sizes differ: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"key/value counts differ: {k.shape} vs {v.shape}")
    if q.shape[:-2] != k.shape[:-2] or k.shape[:-2] != v.shape[:-2]:
        raise DimensionError("query/key/value batch shapes differ")
    if scale is None:
        scale = _default_scale(q.shape[-1])
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * np.float32(scale)
    allowed = np.broadcast_to(np.asarray(allowed, dtype=bool), scores.shape)
    scores = np.where(allowed, scores, SCORE_FLOOR)
    block_max = scores.max(axis=-1)
    weights = np.exp(scores - block_max[..., None])
    weights = np.where(allowed, weights, np.float32(0.0))
    return SoftmaxAccumulator(
        partial_out=np.matmul(weights, v),
        running_max=block_max,
        running_denom=weights.sum(axis=-1),
    )


def finalize_accumulator(acc: SoftmaxAccumulator) -> np.ndarray:
    """Normalize a fully merged accumulator; every query must carry weight."""
    if not np.all(acc.running_denom > 0):
        raise DegenerateRowError("attention query received no allowed keys")
    return acc.partial_out / acc.running_denom[..., None]


def accumulate_attention(
    acc: SoftmaxAccumulator, q, k, v, allowed, scale=None, kv_block: int = KV_BLOCK
) -> SoftmaxAccumulator:
    """Fold one key/value range into ``acc``, sub-blocking the keys.

    ``allowed`` covers (query, key) pairs for the whole range; sub-blocks
    whose mask slice is entirely disallowed are skipped without arithmetic.
    """
    n_keys = k.shape[-2]
    for ks in range(0, n_keys, kv_block):
        ke = min(ks + kv_block, n_keys)
        sub = allowed[..., ks:ke]
        if not sub.any():
            continue
        block = attend_block(q, k[..., ks:ke, :], v[..., ks:ke, :], sub, scale)
        acc = merge_accumulators(acc, block)
    return acc


def attend_masked(
    q, k, v, mask, scale=None, q_block: int = Q_BLOCK, kv_block: int = KV_BLOCK
) -> np.ndarray:
    """Masked attention over full sequences via blocked online softmax.

    ``mask`` is a 2-d {0,1} array over (query, key), shared across leading
    batch axes.  Matches ``reference_attention`` up to accumulation order.
    """
    q = _as_f32(q)
    k = _as_f32(k)
    v = _as_f32(v)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (q.shape[-2], k.shape[-2]):
        raise DimensionError(
            f"mask shape {mask.shape} does not cover {(q.shape[-2], k.shape[-2])}"
        )
    out = np.empty(q.shape[:-1] + (v.shape[-1],), dtype=np.float32)
    for qs in range(0, q.shape[-2], q_block):
        qe = min(qs + q_block, q.shape[-2])
        q_sub = q[..., qs:qe, :]
        acc = empty_accumulator(q_sub.shape[:-1] + (v.shape[-1],))
        acc = accumulate_attention(acc, q_sub, k, v, mask[qs:qe], scale, kv_block)
        out[..., qs:qe, :] = finalize_accumulator(acc)
    return out


def reference_attention(q, k, v, mask, scale=None) -> np.ndarray:
    """Single-pass masked attention; the oracle for the blocked variants."""
    q = _as_f32(q)
    k = _as_f32(k)
    v = _as_f32(v)
    if scale is None:
        scale = _default_scale(q.shape[-1])
    scores = np.matmul(q, np.swapaxes(k, -1, -2)) * np.float32(scale)
    mask_full = np.broadcast_to(np.asarray(mask, dtype=bool), scores.shape)
    flat = softmax_rows(
        scores.reshape(-1, scores.shape[-1]), mask_full.reshape(-1, scores.shape[-1])
    )
    return np.matmul(flat.reshape(scores.shape), v)


def causal_mask(n: int) -> np.ndarray:
    """Lower-triangular visibility for a plain causal sequence."""
    return np.tril(np.ones((n, n), dtype=bool))


def causal_pad_mask(q_pos, k_pos, q_pad=None, k_pad=None) -> np.ndarray:
    """Causal visibility with pad isolation.

    A pad position attends only to itself and is invisible to every other
    position; non-pad positions see all earlier non-pad positions.
    """
    q_pos = np.asarray(q_pos)
    k_pos = np.asarray(k_pos)
    allowed = k_pos[None, :] <= q_pos[:, None]
    if k_pad is not None:
        allowed &= ~np.asarray(k_pad, dtype=bool)[None, :]
    if q_pad is not None:
        allowed &= ~np.asarray(q_pad, dtype=bool)[:, None]
    allowed |= k_pos[None, :] == q_pos[:, None]
    return allowed


def full_pad_mask(q_pos, k_pos, q_pad=None, k_pad=None) -> np.ndarray:
    """Unrestricted visibility with the same pad isolation rule."""
    q_pos = np.asarray(q_pos)
    k_pos = np.asarray(k_pos)
    allowed = np.ones((q_pos.shape[0], k_pos.shape[0]), dtype=bool)
    if k_pad is not None:
        allowed &= ~np.asarray(k_pad, dtype=bool)[None, :]
    if q_pad is not None:
        allowed &= ~np.asarray(q_pad, dtype=bool)[:, None]
    allowed |= k_pos[None, :] == q_pos[:, None]
    return allowed
