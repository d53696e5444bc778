"""Greedy decoding over a fixed-length padded buffer, plus the incremental
cross-check path.

The production path allocates the whole buffer (prompt plus generation
budget) up front and re-runs the distributed forward pass every step with
positions past the frontier masked as pads, so tensor shapes never change
while decoding.  The incremental path grows a key/value cache one token at a
time on a single worker; both must emit identical token sequences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .head import LogitsMasked, compute_logits
from .kernels import (
    accumulate_attention,
    apply_rope,
    empty_accumulator,
    finalize_accumulator,
    gelu,
    matmul,
    rms_norm,
)
from .model import EOS_TOKEN, PAD_TOKEN, Model, forward_tokens, split_heads
from .ring import plan_shards, run_distributed_forward


@dataclass(frozen=True)
class GenerationRequest:
    prompt: tuple[int, ...]
    max_new_tokens: int
    eos_token: int = EOS_TOKEN

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        if len(self.prompt) == 0:
            raise ConfigError("prompt must contain at least one token")
        if self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be positive, got {self.max_new_tokens}")


class FixedLengthBuffer:
    """Token buffer sized ``prompt + budget`` up front.

    Positions at or past the frontier hold the pad token; writing advances
    the frontier by one.  The buffer length never changes while decoding.
    """

    def __init__(self, prompt, max_new_tokens: int, pad_token: int = PAD_TOKEN):
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise ConfigError("prompt must contain at least one token")
        if max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be positive, got {max_new_tokens}")
        self.prompt_len = len(prompt)
        self.capacity = self.prompt_len + max_new_tokens
        self.pad_token = pad_token
        self.tokens = np.full(self.capacity, pad_token, dtype=np.int64)
        self.tokens[: self.prompt_len] = prompt
        self.frontier = self.prompt_len

    @property
    def full(self) -> bool:
        return self.frontier == self.capacity

    def pad_mask(self) -> np.ndarray:
        return np.arange(self.capacity) >= self.frontier

    def append(self, token: int) -> None:
        if self.full:
            raise ConfigError("buffer is full")
        self.tokens[self.frontier] = int(token)
        self.frontier += 1

    def emitted(self) -> list[int]:
        return [int(t) for t in self.tokens[self.prompt_len : self.frontier]]


def next_token_logits(model: Model, buffer: FixedLengthBuffer, plan, transport=None) -> np.ndarray:
    """Logits for the token after the frontier, via one distributed forward.

    Only the frontier row goes through the head (masked strategy), so no
    full logit matrix is ever materialized during decoding.
    """
    hidden = run_distributed_forward(
        model, buffer.tokens, plan, transport=transport,
        pad_mask=buffer.pad_mask(), return_positions=(buffer.frontier - 1,),
    )
    return compute_logits(hidden, model.unembed, LogitsMasked((0,)))[0]


def _strip_eos(emitted: list[int], eos_token: int) -> list[int]:
    if emitted and emitted[-1] == eos_token:
        return emitted[:-1]
    return emitted


def generate_fixed(
    model: Model, request: GenerationRequest, *, world_size: int = 1,
    transport=None, pad_token: int = PAD_TOKEN, step_fn=None,
) -> list[int]:
    """Greedy decode on the fixed-length buffer.

    One full re-forward per emitted token; argmax ties resolve to the lowest
    token id.  The eos token stops decoding and is not part of the output.
    ``step_fn(buffer) -> logits`` can replace the model-driven step.
    """
    buffer = FixedLengthBuffer(request.prompt, request.max_new_tokens, pad_token)
    if step_fn is None:
        plan = plan_shards(buffer.capacity, world_size)

        def step_fn(buf: FixedLengthBuffer) -> np.ndarray:
            return next_token_logits(model, buf, plan, transport)

    while not buffer.full:
        logits = np.asarray(step_fn(buffer))
        token = int(np.argmax(logits))
        buffer.append(token)
        if token == request.eos_token:
            break
    return _strip_eos(buffer.emitted(), request.eos_token)


class KVCache:
    """Per-layer key/value history for single-worker incremental decoding."""

    def __init__(self, model: Model):
        cfg = model.config
        self.keys = [np.zeros((cfg.n_heads, 0, cfg.head_dim), dtype=np.float32)
                     for _ in range(cfg.n_layers)]
        self.values = [np.zeros((cfg.n_heads, 0, cfg.head_dim), dtype=np.float32)
                       for _ in range(cfg.n_layers)]

    def extend(self, layer: int, k: np.ndarray, v: np.ndarray) -> tuple:
        self.keys[layer] = np.concatenate([self.keys[layer], k], axis=1)
        self.values[layer] = np.concatenate([self.values[layer], v], axis=1)
        return self.keys[layer], self.values[layer]

    @property
    def length(self) -> int:
        return self.keys[0].shape[1]


def _cached_step(model: Model, cache: KVCache, token: int, position: int) -> np.ndarray:
    """Advance the cache by one token; returns the final hidden row (1, d)."""
    cfg = model.config
    x = model.embed[np.array([token])]
    pos = np.array([position])
    for li, lw in enumerate(model.layers):
        normed = rms_norm(x, lw.attn_norm)
        q = apply_rope(split_heads(matmul(normed, lw.wq), cfg.n_heads, cfg.head_dim), pos, cfg.rope)
        k = apply_rope(split_heads(matmul(normed, lw.wk), cfg.n_heads, cfg.head_dim), pos, cfg.rope)
        v = split_heads(matmul(normed, lw.wv), cfg.n_heads, cfg.head_dim)
        keys, values = cache.extend(li, k, v)
        allowed = np.ones((1, keys.shape[1]), dtype=bool)
        acc = empty_accumulator((cfg.n_heads, 1, cfg.head_dim))
        context = finalize_accumulator(
            accumulate_attention(acc, q, keys, values, allowed)
        )
        x = x + matmul(context.transpose(1, 0, 2).reshape(1, cfg.d_model), lw.wo)
        hidden = matmul(rms_norm(x, lw.mlp_norm), lw.w1)
        x = x + matmul(gelu(hidden), lw.w2)
    return rms_norm(x, model.final_norm)


def generate_incremental(model: Model, request: GenerationRequest, *,
                         use_cache: bool = True) -> list[int]:
    """Greedy decode on a single worker, growing state one token at a time.

    With ``use_cache`` the key/value history is appended per step; without
    it every step recomputes the whole prefix.  Same stopping rules as
    ``generate_fixed``; the two paths must agree token for token.
    """
    emitted: list[int] = []
    if use_cache:
        cache = KVCache(model)
        hidden = None
        for pos, token in enumerate(request.prompt):
            hidden = _cached_step(model, cache, token, pos)
        while len(emitted) < request.max_new_tokens:
            logits = compute_logits(hidden, model.unembed, LogitsMasked((0,)))[0]
            token = int(np.argmax(logits))
            emitted.append(token)
            if token == request.eos_token:
                break
            if len(emitted) == request.max_new_tokens:
                break
            hidden = _cached_step(model, cache, token, cache.length)
    else:
        while len(emitted) < request.max_new_tokens:
            tokens = list(request.prompt) + emitted
            hidden = forward_tokens(model, tokens)
            logits = compute_logits(
                hidden, model.unembed, LogitsMasked((len(tokens) - 1,))
            )[0]
            token = int(np.argmax(logits))
            emitted.append(token)
            if token == request.eos_token:
                break
    return _strip_eos(emitted, request.eos_token)
