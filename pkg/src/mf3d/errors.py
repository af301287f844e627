"""Exception hierarchy shared across the engine.

The CLI maps these onto exit codes: UsageError -> 2, FormatError -> 3,
InvariantError -> 4.
"""


class Mf3dError(Exception):
    """Base class for all engine errors."""


class UsageError(Mf3dError):
    """Bad invocation: missing inputs, out-of-range parameters."""


class FormatError(Mf3dError):
    """Malformed on-disk data (PLY, bundle, raw buffers, JSON)."""


class PlyParseError(FormatError):
    """PLY header/body could not be parsed; carries the offending line."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"{message} (line {line_number})"
        super().__init__(message)
        self.line_number = line_number


class BundleError(FormatError):
    """Proposal bundle failed validation (checksums, counts, dimensions)."""


class InvariantError(Mf3dError):
    """An internal consistency check failed; indicates a bug."""
