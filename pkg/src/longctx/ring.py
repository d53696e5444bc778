"""Context-parallel ring attention and the distributed forward pass.

The sequence is cut into contiguous shards, one per worker.  Queries stay
resident on their worker; key/value blocks circulate around the ring.  Each
worker folds every visiting block into an online-softmax accumulator in hop
order, so the merge sequence per rank is fixed regardless of transport, and
the in-process and TCP drivers produce bitwise identical outputs.

A normal pass processes the local block at hop zero and then performs
world_size - 1 exchanges, so a ring of W workers sends W * (W - 1) frames
per invocation.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, UnderfullError
from .kernels import (
    KV_BLOCK,
    Q_BLOCK,
    accumulate_attention,
    causal_pad_mask,
    empty_accumulator,
    finalize_accumulator,
    full_pad_mask,
    rms_norm,
)
from .model import Model, embed_tokens, finish_layer, project_qkv
from .transport import RingFrame, SteppedRing


@dataclass(frozen=True)
class ShardPlan:
    """Contiguous, balanced split of a token range across ring workers."""

    seq_len: int
    world_size: int
    ranges: tuple[tuple[int, int], ...]


def plan_shards(seq_len: int, world_size: int) -> ShardPlan:
    """Split ``seq_len`` tokens into world_size contiguous shards.

    Shard sizes differ by at most one; the remainder goes to the lowest
    ranks.  Every worker must receive at least one token.
    """
    if world_size < 1:
        raise ConfigError(f"world_size must be positive, got {world_size}")
    if seq_len < 1:
        raise ConfigError(f"seq_len must be positive, got {seq_len}")
    if seq_len < world_size:
        raise UnderfullError(f"{seq_len} tokens cannot cover {world_size} workers")
    base, rem = divmod(seq_len, world_size)
    ranges = []
    start = 0
    for rank in range(world_size):
        size = base + (1 if rank < rem else 0)
        ranges.append((start, start + size))
        start += size
    return ShardPlan(seq_len=seq_len, world_size=world_size, ranges=tuple(ranges))


class _RankState:
    """One worker's resident queries and partially merged attention state."""

    def __init__(self, rank, plan, q, k, v, key_pad, scale, q_block, kv_block,
                 causal=True):
        self.rank = rank
        self.start, self.end = plan.ranges[rank]
        self.q = q
        self.k = k
        self.v = v
        self.key_pad = key_pad
        self.scale = scale
        self.kv_block = kv_block
        self.mask_fn = causal_pad_mask if causal else full_pad_mask
        self.q_pos = np.arange(self.start, self.end)
        self.q_pad = None if key_pad is None else key_pad[self.start : self.end]
        n = q.shape[-2]
        self.bounds = [(qs, min(qs + q_block, n)) for qs in range(0, n, q_block)]
        self.accs = [
            empty_accumulator(q.shape[:-2] + (qe - qs, v.shape[-1]))
            for qs, qe in self.bounds
        ]

    def own_frame(self) -> RingFrame:
        return RingFrame(
            origin_rank=self.rank, hop=0, start=self.start, end=self.end,
            k_block=self.k, v_block=self.v,
        )

    def absorb(self, frame: RingFrame) -> None:
        k_pos = np.arange(frame.start, frame.end)
        k_pad = None if self.key_pad is None else self.key_pad[frame.start : frame.end]
        for i, (qs, qe) in enumerate(self.bounds):
            q_pad = None if self.q_pad is None else self.q_pad[qs:qe]
            allowed = self.mask_fn(self.q_pos[qs:qe], k_pos, q_pad, k_pad)
            if not allowed.any():
                continue
            self.accs[i] = accumulate_attention(
                self.accs[i], self.q[..., qs:qe, :], frame.k_block, frame.v_block,
                allowed, self.scale, self.kv_block,
            )

    def result(self) -> np.ndarray:
        return np.concatenate([finalize_accumulator(a) for a in self.accs], axis=-2)


def _run_ring_stepped(states, transport) -> list[np.ndarray]:
    """Drive every rank round-robin on a single thread."""
    world = len(states)
    frames = [state.own_frame() for state in states]
    for step in range(world):
        for state, frame in zip(states, frames):
            state.absorb(frame)
        if step < world - 1:
            for rank, frame in enumerate(frames):
                transport.send(rank, frame.advanced())
            frames = [transport.recv(rank) for rank in range(world)]
    return [state.result() for state in states]


def _run_ring_channel(state: _RankState, channel, world: int) -> np.ndarray:
    """One rank's blocking ring pass over a point-to-point channel."""
    frame = state.own_frame()
    for step in range(world):
        state.absorb(frame)
        if step < world - 1:
            channel.send(frame.advanced())
            frame = channel.recv()
    return state.result()


def _check_transport(transport, plan: ShardPlan) -> None:
    if transport.world_size != plan.world_size:
        raise ConfigError(
            f"transport spans {transport.world_size} workers, plan needs {plan.world_size}"
        )


def ring_attention(
    q, k, v, plan: ShardPlan, *, causal: bool = True, key_pad=None, scale=None,
    transport=None, q_block: int = Q_BLOCK, kv_block: int = KV_BLOCK,
) -> np.ndarray:
    """Self-attention with key/value blocks circulating around the ring.

    ``q``, ``k``, ``v`` are full (heads, tokens, head_dim) arrays (a 2-d
    input is treated as a single head); they are sharded by ``plan``.
    ``causal`` restricts visibility to global position j <= i; ``key_pad``
    marks positions that attend only to themselves and are invisible to
    everyone else.
    """
    q = np.asarray(q, dtype=np.float32)
    k = np.asarray(k, dtype=np.float32)
    v = np.asarray(v, dtype=np.float32)
    squeeze = q.ndim == 2
    if squeeze:
        q, k, v = q[None], k[None], v[None]
    if q.ndim != 3:
        raise DimensionError(f"expected (heads, tokens, head_dim), got {q.shape}")
    if k.shape != q.shape or v.shape[:2] != q.shape[:2]:
        raise DimensionError(f"mismatched attention shapes {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != plan.seq_len:
        raise DimensionError(f"{q.shape[1]} tokens do not match plan over {plan.seq_len}")
    if key_pad is not None:
        key_pad = np.asarray(key_pad, dtype=bool)
        if key_pad.shape != (plan.seq_len,):
            raise DimensionError(f"key_pad shape {key_pad.shape} does not cover the sequence")
    owns = transport is None
    if transport is None:
        transport = SteppedRing(plan.world_size)
    _check_transport(transport, plan)

    def make_state(rank: int) -> _RankState:
        s, e = plan.ranges[rank]
        return _RankState(
            rank, plan, q[:, s:e], k[:, s:e], v[:, s:e], key_pad, scale,
            q_block, kv_block, causal,
        )

    try:
        if transport.requires_threads:
            outs = _threaded_ranks(plan.world_size, transport, lambda r, ch: _run_ring_channel(make_state(r), ch, plan.world_size))
        else:
            outs = _run_ring_stepped([make_state(r) for r in range(plan.world_size)], transport)
    finally:
        if owns:
            transport.close()
    full = np.concatenate(outs, axis=1)
    return full[0] if squeeze else full


def _threaded_ranks(world: int, transport, work) -> list:
    """Run ``work(rank, channel)`` on one thread per rank and gather results."""
    results = [None] * world
    errors = [None] * world

    def runner(rank: int) -> None:
        channel = None
        try:
            channel = transport.channel(rank)
            results[rank] = work(rank, channel)
        except BaseException as exc:  # propagated after join
            errors[rank] = exc
        finally:
            if channel is not None:
                channel.close()

    threads = [threading.Thread(target=runner, args=(r,), daemon=True) for r in range(world)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for exc in errors:
        if exc is not None:
            raise exc
    return results


def _gather(shards: list[np.ndarray], return_positions, plan: ShardPlan) -> np.ndarray:
    full = np.concatenate(shards, axis=0)
    if return_positions is None:
        return full
    positions = np.asarray(list(return_positions), dtype=np.int64)
    if positions.size and (positions.min() < 0 or positions.max() >= plan.seq_len):
        raise IndexError(f"requested positions {positions} outside [0, {plan.seq_len})")
    return full[positions]


def run_distributed_forward(
    model: Model, tokens, plan: ShardPlan, *, transport=None, pad_mask=None,
    return_positions=None, q_block: int = Q_BLOCK, kv_block: int = KV_BLOCK,
) -> np.ndarray:
    """Forward pass with the sequence sharded across ring workers.

    Everything except attention is computed shard-locally; attention runs one
    ring pass per layer.  Because projections use the order-pinned matmul,
    per-token results do not depend on shard boundaries outside attention.
    Returns final hidden states, optionally gathered at ``return_positions``.
    """
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.ndim != 1 or ids.shape[0] != plan.seq_len:
        raise DimensionError(f"token count {ids.shape} does not match plan over {plan.seq_len}")
    if pad_mask is not None:
        pad_mask = np.asarray(pad_mask, dtype=bool)
        if pad_mask.shape != (plan.seq_len,):
            raise DimensionError(f"pad_mask shape {pad_mask.shape} does not cover the sequence")
    owns = transport is None
    if transport is None:
        transport = SteppedRing(plan.world_size)
    _check_transport(transport, plan)
    try:
        if transport.requires_threads:
            shards = _forward_threaded(model, ids, plan, transport, pad_mask, q_block, kv_block)
        else:
            shards = _forward_stepped(model, ids, plan, transport, pad_mask, q_block, kv_block)
    finally:
        if owns:
            transport.close()
    return _gather(shards, return_positions, plan)


def _forward_stepped(model, ids, plan, transport, pad_mask, q_block, kv_block):
    world = plan.world_size
    xs = [embed_tokens(model, ids[s:e]) for s, e in plan.ranges]
    positions = [np.arange(s, e) for s, e in plan.ranges]
    for li in range(model.config.n_layers):
        states = []
        for rank in range(world):
            q, k, v = project_qkv(model, li, xs[rank], positions[rank])
            states.append(
                _RankState(rank, plan, q, k, v, pad_mask, None, q_block, kv_block)
            )
        contexts = _run_ring_stepped(states, transport)
        xs = [finish_layer(model, li, xs[r], contexts[r]) for r in range(world)]
    return [rms_norm(x, model.final_norm) for x in xs]


def _forward_threaded(model, ids, plan, transport, pad_mask, q_block, kv_block):
    world = plan.world_size

    def work(rank: int, channel):
        s, e = plan.ranges[rank]
        x = embed_tokens(model, ids[s:e])
        pos = np.arange(s, e)
        for li in range(model.config.n_layers):
            q, k, v = project_qkv(model, li, x, pos)
            state = _RankState(rank, plan, q, k, v, pad_mask, None, q_block, kv_block)
            context = _run_ring_channel(state, channel, world)
            x = finish_layer(model, li, x, context)
        return rms_norm(x, model.final_norm)

    return _threaded_ranks(world, transport, work)
