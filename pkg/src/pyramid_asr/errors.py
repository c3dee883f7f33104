"""Exception types raised across the toolkit."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class StructureError(ValueError):
    """A model configuration violates the pyramid construction rules."""


class WavParseError(ValueError):
    """Malformed or unsupported WAV data; ``offset`` is the byte position."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CTCInfeasibleError(ValueError):
    """The frame sequence is too short to emit the label sequence."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated or from another format version."""
