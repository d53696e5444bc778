"""Exception types shared across the engine."""

from __future__ import annotations


class EngineError(Exception):
    """Base class for all engine-raised errors."""


class DimensionError(EngineError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(EngineError, ValueError):
    """A configuration value is outside its legal range."""


class DegenerateRowError(EngineError, ValueError):
    """A softmax row has no allowed entries."""


class UnderfullError(EngineError, ValueError):
    """A sequence is too short to give every worker at least one token."""


class OversizeSampleError(EngineError, ValueError):
    """A sample is longer than the packing target length."""


class EmptyMixtureError(EngineError, ValueError):
    """Every mixture source has zero effective weight."""


class EmptySelectionError(EngineError, ValueError):
    """A position-selecting head strategy received no positions."""


class EmptyWindowError(EngineError, ValueError):
    """A trailing-window loss was requested over zero positions."""


class LayoutError(EngineError, ValueError):
    """Multimodal splice offsets are out of order or out of range."""


class CapacityError(EngineError, ValueError):
    """A memory budget cannot hold even a single token."""


class FrameFormatError(EngineError, ValueError):
    """A wire frame does not match the fixed binary layout."""


class ImageFormatError(EngineError, ValueError):
    """An image container file does not match the fixed binary layout."""


class CheckpointError(EngineError, RuntimeError):
    """A checkpoint file is malformed or inconsistent."""


class RingBrokenError(EngineError, RuntimeError):
    """A ring neighbor stopped responding; ``rank`` names the dead worker."""

    def __init__(self, rank: int, message: str | None = None):
        self.rank = rank
        super().__init__(message or f"ring broken: worker {rank} is unreachable")
