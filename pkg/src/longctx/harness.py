"""Benchmarks, capacity reports, and the quick verification suite."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .capacity import CapacityModel, logits_gigabytes, reduction_factor
from .errors import ConfigError
from .head import (
    DEFAULT_CHUNK_LEN,
    Chunked,
    Full,
    HeadMeter,
    LogitsMasked,
    compute_logits,
)
from .kernels import apply_rope, reference_attention, RopeConfig
from .model import Model, ModelConfig, build_model, forward, embed_tokens
from .packing import PackingMode, Sample, build_attention_mask, pack_samples
from .report import (
    coefficient_of_variation,
    figure_path,
    save_bench_figure,
    save_capacity_figure,
    write_csv,
)
from .ring import plan_shards, ring_attention, run_distributed_forward
from .transport import SteppedRing, TcpRing
from .vision import frame_token_budget, pixel_shuffle, pixel_unshuffle
from .decode import GenerationRequest, generate_fixed, generate_incremental

BENCH_FIELDS = [
    "seq_len", "head", "workers", "transport", "rep", "status",
    "wall_time_s", "cv_wall_time", "head_flops", "peak_logit_rows", "frames_sent",
]

CAPACITY_FIELDS = ["strategy", "workers", "budget_per_worker", "max_context", "bytes_at_cap"]

# Slim decoder dims keep single-core benchmark runs in seconds while the
# sequence length and vocabulary stay at full scale.
BENCH_D_MODEL = 16
BENCH_N_HEADS = 1
BENCH_N_LAYERS = 4


@dataclass
class BenchSpec:
    """One prefill benchmark: sequence scale, head strategy, ring setup."""

    seq_len: int | None = None
    frames: int | None = None
    head: str = "full"
    chunk_len: int = DEFAULT_CHUNK_LEN
    world_size: int = 1
    transport: str = "inproc"
    reps: int = 5
    vocab_size: int = 32_768
    seed: int = 0
    memory_budget: int | None = None
    out: str | None = None

    def resolve_seq_len(self) -> int:
        if (self.seq_len is None) == (self.frames is None):
            raise ConfigError("specify exactly one of seq_len or frames")
        if self.frames is not None:
            return frame_token_budget(self.frames)
        if self.seq_len < 1:
            raise ConfigError(f"seq_len must be positive, got {self.seq_len}")
        return self.seq_len


def _bench_strategy(spec: BenchSpec, seq_len: int):
    if spec.head == "full":
        return Full()
    if spec.head == "chunked":
        return Chunked(spec.chunk_len)
    if spec.head == "masked":
        return LogitsMasked((seq_len - 1,))
    raise ConfigError(f"unknown head {spec.head!r}; use full, chunked, or masked")


def _peak_rows(spec: BenchSpec, seq_len: int) -> int:
    if spec.head == "full":
        return seq_len
    if spec.head == "chunked":
        return min(spec.chunk_len, seq_len)
    return 1


def _make_transport(spec: BenchSpec):
    if spec.transport == "inproc":
        return SteppedRing(spec.world_size)
    if spec.transport == "tcp":
        return TcpRing(spec.world_size, BENCH_N_HEADS, BENCH_D_MODEL // BENCH_N_HEADS)
    raise ConfigError(f"unknown transport {spec.transport!r}; use inproc or tcp")


def bench_prefill(spec: BenchSpec) -> list[dict]:
    """Time prefill plus head under one strategy; returns the report rows.

    Writes the CSV and its companion figure when ``spec.out`` is set.  A
    configured memory budget smaller than the head's live logit buffer turns
    the run into a single ``oom`` row instead of an attempt.
    """
    seq_len = spec.resolve_seq_len()
    strategy = _bench_strategy(spec, seq_len)
    base = {
        "seq_len": seq_len, "head": spec.head, "workers": spec.world_size,
        "transport": spec.transport,
    }
    rows_needed = _peak_rows(spec, seq_len)
    logit_bytes = rows_needed * spec.vocab_size * 4
    if spec.memory_budget is not None and logit_bytes > spec.memory_budget:
        rows = [dict(
            base, rep=0, status="oom", wall_time_s=float("nan"), cv_wall_time=0.0,
            head_flops=0, peak_logit_rows=rows_needed, frames_sent=0,
        )]
    else:
        config = ModelConfig(
            d_model=BENCH_D_MODEL, n_layers=BENCH_N_LAYERS, n_heads=BENCH_N_HEADS,
            head_dim=BENCH_D_MODEL // BENCH_N_HEADS, vocab_size=spec.vocab_size,
            seed=spec.seed,
        )
        model = build_model(config)
        plan = plan_shards(seq_len, spec.world_size)
        tokens = np.random.default_rng(spec.seed).integers(
            0, spec.vocab_size, size=seq_len, dtype=np.int64
        )
        samples = []
        for rep in range(spec.reps):
            transport = _make_transport(spec)
            meter = HeadMeter()
            start = time.perf_counter()
            hidden = run_distributed_forward(model, tokens, plan, transport=transport)
            logits = compute_logits(hidden, model.unembed, strategy, meter)
            elapsed = time.perf_counter() - start
            frames = transport.frames_sent
            transport.close()
            del logits, hidden
            samples.append((elapsed, meter, frames))
        cv = coefficient_of_variation([s[0] for s in samples])
        rows = [
            dict(
                base, rep=rep, status="ok", wall_time_s=elapsed, cv_wall_time=cv,
                head_flops=meter.flops, peak_logit_rows=meter.peak_rows,
                frames_sent=frames,
            )
            for rep, (elapsed, meter, frames) in enumerate(samples)
        ]
    if spec.out:
        write_csv(spec.out, BENCH_FIELDS, rows)
        save_bench_figure(rows, figure_path(spec.out))
    return rows


def capacity_report(model: CapacityModel, worker_counts,
                    strategies=("full", "masked"), out=None) -> list[dict]:
    """Maximum context per strategy and worker count under one budget."""
    rows = []
    for strategy in strategies:
        for workers in worker_counts:
            cap = model.max_context(strategy, workers)
            rows.append({
                "strategy": strategy, "workers": workers,
                "budget_per_worker": model.budget_per_worker, "max_context": cap,
                "bytes_at_cap": model.per_worker_bytes(strategy, cap, workers),
            })
    if out:
        write_csv(out, CAPACITY_FIELDS, rows)
        save_capacity_figure(rows, figure_path(out))
    return rows


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _check(results: list, name: str, fn) -> None:
    try:
        fn()
        results.append(CheckResult(name, True))
    except BaseException as exc:  # report, never raise
        results.append(CheckResult(name, False, f"{type(exc).__name__}: {exc}"))


def run_verify() -> list[CheckResult]:
    """Fast self-checks across every subsystem; the full suite lives in tests."""
    results: list[CheckResult] = []
    rng = np.random.default_rng(7)

    def ring_exact():
        heads, seq, hd, workers = 2, 64, 16, 4
        q = rng.standard_normal((heads, seq, hd)).astype(np.float32)
        k = rng.standard_normal((heads, seq, hd)).astype(np.float32)
        v = rng.standard_normal((heads, seq, hd)).astype(np.float32)
        plan = plan_shards(seq, workers)
        transport = SteppedRing(workers)
        out = ring_attention(q, k, v, plan, transport=transport)
        idx = np.arange(seq)
        oracle = reference_attention(q, k, v, idx[None, :] <= idx[:, None])
        assert np.max(np.abs(out - oracle)) <= 1e-5, "ring output off oracle"
        expect = workers * (workers - 1)
        assert transport.frames_sent == expect, f"{transport.frames_sent} frames != {expect}"

    def head_bitwise():
        hidden = rng.standard_normal((16, 8)).astype(np.float32)
        unembed = rng.standard_normal((8, 32)).astype(np.float32)
        full = compute_logits(hidden, unembed, Full())
        chunked = compute_logits(hidden, unembed, Chunked(5))
        masked = compute_logits(hidden, unembed, LogitsMasked((3, 11)))
        assert np.array_equal(full, chunked), "chunked differs from full"
        assert np.array_equal(full[[3, 11]], masked), "masked differs from full rows"

    def memory_exact():
        assert logits_gigabytes(10**6, 10**5, 4) == 400.0
        assert logits_gigabytes(1, 10**5, 4) == 0.0004
        assert reduction_factor(10**6, 1) == 10**6

    def capacity_doubling():
        cm = CapacityModel()
        caps = [cm.max_context("masked", w) for w in (8, 16, 32)]
        assert caps == [400_000, 800_000, 1_600_000], f"masked caps {caps}"
        ratio = caps[0] / cm.max_context("full", 8)
        assert 4.0 <= ratio <= 4.38, f"ratio {ratio}"

    def rope_identity():
        cfg = RopeConfig(head_dim=8)
        x = rng.standard_normal((1, 4, 8)).astype(np.float32)
        out = apply_rope(x, np.zeros(4, dtype=np.int64), cfg)
        assert np.array_equal(out, x), "rotation at position zero changed bits"

    def pack_isolated():
        model = build_model(ModelConfig(seed=3))
        a = Sample(tokens=tuple(rng.integers(3, 100, size=5)))
        b = Sample(tokens=tuple(rng.integers(3, 100, size=4)))
        packed = pack_samples([a, b], 12, PackingMode.RESET_ISOLATED)[0]
        mask = build_attention_mask(packed)
        hidden = forward(model, embed_tokens(model, packed.tokens), mask, packed.positions)
        alone = forward(
            model, embed_tokens(model, np.array(a.tokens)),
            np.tril(np.ones((5, 5), dtype=bool)), np.arange(5),
        )
        assert np.max(np.abs(hidden[:5] - alone)) <= 1e-5, "packed neighbor leaked in"

    def decode_agrees():
        model = build_model(ModelConfig(d_model=32, n_heads=2, head_dim=16,
                                        n_layers=2, vocab_size=64, seed=11))
        for seed in range(3):
            prompt = tuple(np.random.default_rng(seed).integers(3, 64, size=5))
            req = GenerationRequest(prompt=prompt, max_new_tokens=4)
            assert generate_fixed(model, req) == generate_incremental(model, req)

    def shuffle_roundtrip():
        feats = rng.standard_normal((64, 6)).astype(np.float32)
        shuffled = pixel_shuffle(feats, 2)
        assert shuffled.shape == (16, 24)
        assert np.array_equal(np.sort(shuffled.ravel()), np.sort(feats.ravel()))
        assert np.array_equal(pixel_unshuffle(shuffled, 2), feats)
        assert frame_token_budget(390) == 99_840

    _check(results, "ring-attention-exactness", ring_exact)
    _check(results, "head-strategies-bitwise", head_bitwise)
    _check(results, "memory-arithmetic", memory_exact)
    _check(results, "capacity-doubling", capacity_doubling)
    _check(results, "rope-zero-identity", rope_identity)
    _check(results, "packing-isolation", pack_isolated)
    _check(results, "decode-paths-agree", decode_agrees)
    _check(results, "pixel-shuffle-budget", shuffle_roundtrip)
    return results
