"""Sequence packing, attention-mask construction, and mixture sampling.

Packing concatenates whole samples into fixed-length sequences, greedy
first-fit in arrival order; a sample never splits across packs.  Two regimes
control what the packed samples can see of each other:

* reset-isolated: positions restart at every sample boundary and the mask is
  block-diagonal causal, so packed neighbors are invisible to each other;
  samples only share a pack with others from the same source.
* continuous-shared: positions run across the whole pack, every non-pad
  token shares one segment and a plain causal mask, and sources mix freely.

Pad tails carry a reserved segment id and attend only to themselves.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    DimensionError,
    EmptyMixtureError,
    OversizeSampleError,
)
from .model import PAD_TOKEN

# Reserved segment id for pad tails; the largest int32 keeps ids non-negative.
PAD_SEGMENT_ID = 0x7FFF_FFFF


class PackingMode(enum.Enum):
    RESET_ISOLATED = "reset"
    CONTINUOUS_SHARED = "shared"


@dataclass(frozen=True)
class Sample:
    tokens: tuple[int, ...]
    source_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))
        if len(self.tokens) == 0:
            raise ConfigError("a sample must contain at least one token")

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass
class PackedSequence:
    """One fixed-length pack: tokens, per-token positions and segment ids."""

    target_len: int
    mode: PackingMode
    tokens: np.ndarray       # (target_len,) int64
    positions: np.ndarray    # (target_len,) int64
    segment_ids: np.ndarray  # (target_len,) int64
    sample_spans: list[tuple[int, int]] = field(default_factory=list)

    @property
    def pad_count(self) -> int:
        used = self.sample_spans[-1][1] if self.sample_spans else 0
        return self.target_len - used

    def pad_mask(self) -> np.ndarray:
        return self.segment_ids == PAD_SEGMENT_ID


def pack_samples(samples, target_len: int, mode: PackingMode,
                 pad_token: int = PAD_TOKEN) -> list[PackedSequence]:
    """Pack samples greedy first-fit in arrival order; bins stay open.

    Every sample lands whole in the first pack with room for it; in
    reset-isolated mode the pack must also share the sample's source.
    """
    if target_len < 1:
        raise ConfigError(f"target_len must be positive, got {target_len}")
    mode = PackingMode(mode)
    bins: list[dict] = []
    for index, sample in enumerate(samples):
        if len(sample) > target_len:
            raise OversizeSampleError(
                f"sample {index} of {len(sample)} tokens exceeds target {target_len}"
            )
        placed = None
        for b in bins:
            if b["used"] + len(sample) > target_len:
                continue
            if mode is PackingMode.RESET_ISOLATED and b["source"] != sample.source_id:
                continue
            placed = b
            break
        if placed is None:
            placed = {"source": sample.source_id, "used": 0, "samples": []}
            bins.append(placed)
        placed["samples"].append(sample)
        placed["used"] += len(sample)
    return [_materialize(b["samples"], target_len, mode, pad_token) for b in bins]


def _materialize(samples, target_len, mode, pad_token) -> PackedSequence:
    tokens = np.full(target_len, pad_token, dtype=np.int64)
    positions = np.zeros(target_len, dtype=np.int64)
    segments = np.full(target_len, PAD_SEGMENT_ID, dtype=np.int64)
    spans = []
    cursor = 0
    for seg, sample in enumerate(samples):
        n = len(sample)
        tokens[cursor : cursor + n] = sample.tokens
        if mode is PackingMode.RESET_ISOLATED:
            positions[cursor : cursor + n] = np.arange(n)
            segments[cursor : cursor + n] = seg
        else:
            segments[cursor : cursor + n] = 0
        spans.append((cursor, cursor + n))
        cursor += n
    if mode is PackingMode.RESET_ISOLATED:
        # the pad tail is its own segment with restarted positions
        positions[cursor:] = np.arange(target_len - cursor)
    else:
        positions[:] = np.arange(target_len)
    return PackedSequence(
        target_len=target_len, mode=mode, tokens=tokens,
        positions=positions, segment_ids=segments, sample_spans=spans,
    )


def build_attention_mask(packed: PackedSequence) -> np.ndarray:
    """{0,1} visibility for a packed sequence; every row allows itself.

    Reset-isolated packs are block-diagonal causal over segments;
    continuous-shared packs are plain causal over non-pad tokens.  Pad rows
    and columns only meet on the diagonal.
    """
    n = packed.target_len
    idx = np.arange(n)
    causal = idx[None, :] <= idx[:, None]
    pad = packed.pad_mask()
    allowed = causal & ~pad[None, :] & ~pad[:, None]
    if packed.mode is PackingMode.RESET_ISOLATED:
        allowed &= packed.segment_ids[None, :] == packed.segment_ids[:, None]
    allowed |= np.eye(n, dtype=bool)
    return allowed


def write_packed(packs, path) -> None:
    """Serialize packs to the line-delimited text format.

    Per pack: a ``pack`` header line (target length, mode, span count), a
    ``spans`` line of start/end pairs, then ``tokens``, ``positions``, and
    ``segments`` lines of space-separated integers.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for p in packs:
            fh.write(f"pack {p.target_len} {p.mode.value} {len(p.sample_spans)}\n")
            flat = " ".join(f"{s} {e}" for s, e in p.sample_spans)
            fh.write(("spans " + flat).rstrip() + "\n")
            for name, arr in (("tokens", p.tokens), ("positions", p.positions),
                              ("segments", p.segment_ids)):
                fh.write(f"{name} " + " ".join(str(int(x)) for x in arr) + "\n")


def read_packed(path) -> list[PackedSequence]:
    """Parse the text format written by ``write_packed``."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    packs = []
    i = 0
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "pack" or len(head) != 4:
            raise ConfigError(f"bad pack header: {lines[i]!r}")
        target_len, mode, n_spans = int(head[1]), PackingMode(head[2]), int(head[3])
        span_parts = lines[i + 1].split()
        if span_parts[0] != "spans" or len(span_parts) != 1 + 2 * n_spans:
            raise ConfigError(f"bad spans line: {lines[i + 1]!r}")
        nums = [int(x) for x in span_parts[1:]]
        spans = [(nums[2 * j], nums[2 * j + 1]) for j in range(n_spans)]
        arrays = {}
        for j, name in enumerate(("tokens", "positions", "segments")):
            parts = lines[i + 2 + j].split()
            if parts[0] != name or len(parts) != 1 + target_len:
                raise ConfigError(f"bad {name} line in pack starting at line {i}")
            arrays[name] = np.array([int(x) for x in parts[1:]], dtype=np.int64)
        packs.append(
            PackedSequence(
                target_len=target_len, mode=mode, tokens=arrays["tokens"],
                positions=arrays["positions"], segment_ids=arrays["segments"],
                sample_spans=spans,
            )
        )
        i += 5
    return packs


@dataclass(frozen=True)
class MixtureSource:
    """One corpus in a sampling mixture.

    Weight is ``sampling_ratio * size`` when a ratio is given, clamped by
    ``max_number`` when present; with only ``max_number`` the weight is
    ``min(size, max_number)``.
    """

    name: str
    size: int
    sampling_ratio: float | None = None
    max_number: int | None = None

    def __post_init__(self):
        if self.size < 0:
            raise ConfigError(f"source {self.name} has negative size {self.size}")
        if self.sampling_ratio is not None and not 0.0 <= self.sampling_ratio <= 1.0:
            raise ConfigError(
                f"source {self.name} ratio {self.sampling_ratio} outside [0, 1]"
            )
        if self.max_number is not None and self.max_number < 0:
            raise ConfigError(f"source {self.name} max_number {self.max_number} negative")

    def weight(self) -> float:
        w = float(self.size)
        if self.sampling_ratio is not None:
            w = self.sampling_ratio * self.size
        if self.max_number is not None:
            w = min(w, float(self.max_number))
        return w


def sample_mixture(sources, n_draws: int, seed: int) -> np.ndarray:
    """Draw source indices proportional to effective weights, seeded."""
    sources = list(sources)
    if n_draws < 0:
        raise ConfigError(f"n_draws must be non-negative, got {n_draws}")
    weights = np.array([s.weight() for s in sources], dtype=np.float64)
    total = weights.sum()
    if not sources or total <= 0:
        raise EmptyMixtureError("every mixture source has zero effective weight")
    rng = np.random.default_rng(seed)
    return rng.choice(len(sources), size=n_draws, p=weights / total)
