"""Define the exception hierarchy shared by every pipeline stage.

Each class carries the process exit code the CLI reports for it.
"""

from __future__ import annotations

from typing import Optional


class BeamAlignError(Exception):
    """Base class for all errors raised by the toolkit."""

    exit_code: int = 1


class ConfigError(BeamAlignError):
    """Invalid or inconsistent configuration."""

    exit_code = 2


class InvalidArgumentError(BeamAlignError, ValueError):
    """An operation received an argument outside its domain."""

    exit_code = 2


class LineageMismatchError(ConfigError):
    """Artifacts were produced from different data-generating configurations."""


class DataFormatError(BeamAlignError):
    """A binary artifact could not be decoded."""

    exit_code = 3


class ArtifactIOError(DataFormatError):
    """An artifact or report could not be read from or written to disk."""


class TruncatedFileError(DataFormatError):
    """The file ends before the records its header announces."""


class ChecksumError(DataFormatError):
    """The trailing CRC32 does not match the payload."""


class VersionMismatchError(DataFormatError):
    """The file was written by an unsupported format version."""


class DegenerateInputError(BeamAlignError, ValueError):
    """The input carries no usable signal (all-zero channels, empty scenario)."""

    exit_code = 3


class SplitOverlapError(DataFormatError):
    """Calibration samples also appear in the training split."""


class NumericFailureError(BeamAlignError):
    """A numeric procedure failed to produce finite results."""

    exit_code = 4


class TrainingDivergenceError(NumericFailureError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, loss: Optional[float] = None):
        self.epoch = epoch
        self.loss = loss
        super().__init__(f"Training diverged at epoch {epoch} (loss={loss})")
