"""Analytic memory model for logit buffers and context capacity.

All arithmetic is exact Python integer arithmetic; a gigabyte is 10^9 bytes.
The capacity model answers one question: given a fixed per-worker byte
budget, how long can the context grow before the worst-loaded worker
overflows?  The full head stores one logit row per resident token, so its
cap barely moves with more workers; the masked head stores a constant number
of rows, so its cap scales linearly with the worker count.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import CapacityError, ConfigError

GB = 10**9

_U64_LIMIT = 2**64


def logits_bytes(seq_len: int, vocab_size: int, bytes_per_logit: int = 4) -> int:
    """Exact size of a dense logit buffer; overflow past u64 is an error."""
    for name, value in (("seq_len", seq_len), ("vocab_size", vocab_size),
                        ("bytes_per_logit", bytes_per_logit)):
        if int(value) != value or value < 0:
            raise ConfigError(f"{name} must be a non-negative integer, got {value}")
    total = int(seq_len) * int(vocab_size) * int(bytes_per_logit)
    if total >= _U64_LIMIT:
        raise OverflowError(f"logit buffer of {total} bytes exceeds the 64-bit range")
    return total


def logits_gigabytes(seq_len: int, vocab_size: int, bytes_per_logit: int = 4) -> float:
    """Dense logit buffer size in decimal gigabytes."""
    return logits_bytes(seq_len, vocab_size, bytes_per_logit) / GB


def reduction_factor(seq_len: int, masked_rows: int = 1):
    """Exact ratio of full-head rows to masked-head rows."""
    if seq_len < 1 or masked_rows < 1:
        raise ConfigError(f"need positive row counts, got {seq_len} and {masked_rows}")
    if seq_len % masked_rows == 0:
        return seq_len // masked_rows
    return seq_len / masked_rows


@dataclass(frozen=True)
class MemoryEstimate:
    """Exact size of one dense logit buffer."""

    rows: int
    vocab_size: int
    bytes_per_logit: int
    total_bytes: int

    @property
    def gigabytes(self) -> float:
        return self.total_bytes / GB

    def reduction_from(self, reference: "MemoryEstimate"):
        """How many times smaller this buffer is than a reference buffer."""
        if reference.total_bytes % self.total_bytes == 0:
            return reference.total_bytes // self.total_bytes
        return reference.total_bytes / self.total_bytes


def estimate_logit_memory(rows: int, vocab_size: int, bytes_per_logit: int = 4) -> MemoryEstimate:
    """Size a dense logit buffer of ``rows`` x ``vocab_size`` entries exactly."""
    for name, value in (("rows", rows), ("vocab_size", vocab_size),
                        ("bytes_per_logit", bytes_per_logit)):
        if int(value) != value or value < 1:
            raise ConfigError(f"{name} must be a positive integer, got {value}")
    total = logits_bytes(rows, vocab_size, bytes_per_logit)
    return MemoryEstimate(rows=int(rows), vocab_size=int(vocab_size),
                          bytes_per_logit=int(bytes_per_logit), total_bytes=total)


@dataclass(frozen=True)
class CapacityModel:
    """Per-worker memory accounting for a context-parallel decoder.

    ``act_bytes_per_token`` covers weights-independent activation state per
    resident token; the head term covers live logit rows.  Defaults are
    engineered so the masked head caps at exactly 400,000 tokens for 8
    workers and doubles with the worker count.
    """

    vocab_size: int = 100_000
    bytes_per_logit: int = 4
    act_bytes_per_token: int = 126_000
    budget_per_worker: int = 6_300_400_000
    fixed_bytes: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "bytes_per_logit", "act_bytes_per_token",
                     "budget_per_worker", "fixed_bytes"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative, got {getattr(self, name)}")

    def resident_tokens(self, seq_len: int, world_size: int) -> int:
        """Tokens on the worst-loaded worker under balanced contiguous shards."""
        return -(-seq_len // world_size)

    def head_rows(self, strategy: str, seq_len: int, world_size: int, masked_rows: int = 1) -> int:
        """Live logit rows on the worst-loaded worker for a head strategy."""
        if strategy == "full":
            return self.resident_tokens(seq_len, world_size)
        if strategy == "masked":
            return masked_rows
        raise ConfigError(f"unknown head strategy {strategy!r}")

    def per_worker_bytes(self, strategy: str, seq_len: int, world_size: int,
                         masked_rows: int = 1) -> int:
        if world_size < 1:
            raise ConfigError(f"world_size must be positive, got {world_size}")
        if seq_len < 1:
            raise ConfigError(f"seq_len must be positive, got {seq_len}")
        rows = self.head_rows(strategy, seq_len, world_size, masked_rows)
        return (
            self.fixed_bytes
            + self.act_bytes_per_token * self.resident_tokens(seq_len, world_size)
            + rows * self.vocab_size * self.bytes_per_logit
        )

    def max_context(self, strategy: str, world_size: int, masked_rows: int = 1) -> int:
        """Largest context that fits the per-worker budget, by binary search."""
        if self.per_worker_bytes(strategy, 1, world_size, masked_rows) > self.budget_per_worker:
            raise CapacityError(
                f"budget {self.budget_per_worker} cannot hold one token on {world_size} workers"
            )
        lo = 1
        hi = 2
        while self.per_worker_bytes(strategy, hi, world_size, masked_rows) <= self.budget_per_worker:
            lo = hi
            hi *= 2
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if self.per_worker_bytes(strategy, mid, world_size, masked_rows) <= self.budget_per_worker:
                lo = mid
            else:
                hi = mid
        return lo
