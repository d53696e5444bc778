"""Language-model head strategies over the final hidden states.

The full head projects every position onto the vocabulary at once; the
chunked head streams fixed-size row chunks through a scratch buffer; the
masked head projects only an explicit set of positions.  All three share the
same order-pinned row kernel, so for the rows they do compute they agree bit
for bit; they differ only in how many logit rows are ever live at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, EmptySelectionError, EmptyWindowError
from .kernels import matmul

DEFAULT_CHUNK_LEN = 32_768

# Rows are pushed through the order-pinned kernel in fixed batches for cache
# locality; results are bitwise independent of this number.
ROW_BATCH = 256


@dataclass(frozen=True)
class Full:
    """Materialize logits for every position."""


@dataclass(frozen=True)
class Chunked:
    """Materialize logits chunk_len rows at a time through a scratch buffer."""

    chunk_len: int = DEFAULT_CHUNK_LEN

    def __post_init__(self):
        if self.chunk_len < 1:
            raise ConfigError(f"chunk_len must be positive, got {self.chunk_len}")


@dataclass(frozen=True)
class LogitsMasked:
    """Materialize logits only for the given positions."""

    positions: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(int(p) for p in self.positions))
        if len(self.positions) == 0:
            raise EmptySelectionError("masked head needs at least one position")


HeadStrategy = Full | Chunked | LogitsMasked


@dataclass
class HeadMeter:
    """Tracks live logit rows and multiply-add work inside the head."""

    live_rows: int = 0
    peak_rows: int = 0
    flops: int = 0
    allocations: list[int] = field(default_factory=list)

    def alloc(self, rows: int) -> None:
        self.live_rows += rows
        self.peak_rows = max(self.peak_rows, self.live_rows)
        self.allocations.append(rows)

    def free(self, rows: int) -> None:
        self.live_rows -= rows

    def count(self, rows: int, d_model: int, vocab: int) -> None:
        self.flops += 2 * rows * d_model * vocab


def _logit_rows(rows: np.ndarray, unembed: np.ndarray, out: np.ndarray) -> None:
    """Shared row kernel; row batching cannot change any bit of the result."""
    for rs in range(0, rows.shape[0], ROW_BATCH):
        re = min(rs + ROW_BATCH, rows.shape[0])
        out[rs:re] = matmul(rows[rs:re], unembed)


def compute_logits(
    hidden, unembed, strategy: HeadStrategy, meter: HeadMeter | None = None
) -> np.ndarray:
    """Project hidden states onto the vocabulary under a head strategy.

    Full and Chunked return one row per position and are bitwise equal;
    LogitsMasked returns one row per requested position, each bitwise equal
    to the corresponding full-head row.
    """
    hidden = np.asarray(hidden, dtype=np.float32)
    unembed = np.asarray(unembed, dtype=np.float32)
    if hidden.ndim != 2 or unembed.ndim != 2 or hidden.shape[1] != unembed.shape[0]:
        raise DimensionError(f"hidden {hidden.shape} does not project through {unembed.shape}")
    n, d = hidden.shape
    vocab = unembed.shape[1]
    meter = meter if meter is not None else HeadMeter()

    if isinstance(strategy, Full):
        meter.alloc(n)
        meter.count(n, d, vocab)
        out = np.empty((n, vocab), dtype=np.float32)
        _logit_rows(hidden, unembed, out)
        meter.free(n)
        return out

    if isinstance(strategy, Chunked):
        out = np.empty((n, vocab), dtype=np.float32)
        for cs in range(0, n, strategy.chunk_len):
            ce = min(cs + strategy.chunk_len, n)
            meter.alloc(ce - cs)
            meter.count(ce - cs, d, vocab)
            scratch = np.empty((ce - cs, vocab), dtype=np.float32)
            _logit_rows(hidden[cs:ce], unembed, scratch)
            out[cs:ce] = scratch
            meter.free(ce - cs)
        return out

    if isinstance(strategy, LogitsMasked):
        positions = np.asarray(strategy.positions, dtype=np.int64)
        if positions.min() < 0 or positions.max() >= n:
            raise IndexError(f"head positions {strategy.positions} outside [0, {n})")
        meter.alloc(len(positions))
        meter.count(len(positions), d, vocab)
        out = np.empty((len(positions), vocab), dtype=np.float32)
        _logit_rows(hidden[positions], unembed, out)
        meter.free(len(positions))
        return out

    raise ConfigError(f"unknown head strategy {strategy!r}")


def loss_over_window(hidden, unembed, targets, window: int) -> float:
    """Mean cross-entropy over the trailing ``window`` positions.

    Only the windowed logit rows are ever materialized; the result equals a
    full-head cross-entropy restricted to the same positions because the
    masked rows are bitwise identical to the full rows.
    """
    hidden = np.asarray(hidden, dtype=np.float32)
    n = hidden.shape[0]
    if window < 1:
        raise EmptyWindowError(f"loss window must be positive, got {window}")
    if window > n:
        raise DimensionError(f"window {window} exceeds {n} positions")
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (window,):
        raise DimensionError(f"targets shape {targets.shape} does not match window {window}")
    positions = tuple(range(n - window, n))
    logits = compute_logits(hidden, unembed, LogitsMasked(positions))
    vocab = logits.shape[1]
    if targets.min() < 0 or targets.max() >= vocab:
        raise IndexError(f"target ids outside vocabulary of {vocab}")
    z = logits.astype(np.float64)
    row_max = z.max(axis=1)
    log_norm = np.log(np.exp(z - row_max[:, None]).sum(axis=1)) + row_max
    picked = z[np.arange(window), targets]
    return float(np.mean(log_norm - picked))
