"""Exception hierarchy shared across the pipeline.

Every error raised by this package derives from CampVqaError so callers can
catch pipeline failures without swallowing unrelated bugs.
"""

from __future__ import annotations


class CampVqaError(Exception):
    """Base class for all pipeline errors."""


class ParseError(CampVqaError):
    """Malformed container or stream header."""


class TruncatedStream(CampVqaError):
    """Stream ended mid-frame."""


class InconsistentFrames(CampVqaError):
    """Frames within one video disagree on dimensions."""


class ConfigError(CampVqaError):
    """Invalid or incomplete configuration."""


class InputTooSmall(CampVqaError):
    """Input lacks the minimum size an operation requires."""


class DimError(CampVqaError):
    """Vector or matrix dimensions do not match the declared contract."""


class RangeError(CampVqaError):
    """A value falls outside its declared range."""


class FormatError(CampVqaError):
    """File does not conform to the expected binary format."""


class CorruptFile(CampVqaError):
    """Integrity check (CRC) failed."""


class InvalidData(CampVqaError):
    """Payload parsed but violates a data invariant (e.g. non-finite floats)."""


class IoError(CampVqaError):
    """Underlying I/O operation failed."""


class DegenerateInput(CampVqaError):
    """Statistic is undefined for this input (e.g. constant vector)."""


class InternalError(CampVqaError):
    """Invariant violation that indicates a caller or library bug."""
