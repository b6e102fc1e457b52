"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: configuration problems exit 2, data
problems exit 3 and numerical failures exit 4.
"""


class FNFMError(Exception):
    """Base class for all package errors."""


class ConfigError(FNFMError, ValueError):
    """Invalid configuration or argument value."""


class DataError(FNFMError, ValueError):
    """Base for problems with input data or files."""


class SchemaError(DataError):
    """Field schema is invalid or does not match the data."""


class ParseError(DataError):
    """A raw row could not be encoded."""


class SplitError(DataError):
    """Day-based splitting is impossible for the given rows."""


class ShapeError(FNFMError, ValueError):
    """Array shapes disagree with the layer or model contract."""


class StateError(FNFMError, RuntimeError):
    """An operation was called in the wrong state (e.g. backward before forward)."""


class BatchError(FNFMError, ValueError):
    """Batch too small for the requested operation."""


class NumericError(FNFMError, ArithmeticError):
    """Non-finite values appeared in a loss, gradient or parameter."""


class UndefinedMetricError(FNFMError, ValueError):
    """Metric is undefined for the given labels (e.g. AUC with one class)."""


class FormatError(DataError):
    """Binary file is not in the expected format."""


class VersionError(FormatError):
    """Binary file carries an unsupported format version."""


class ChecksumError(FormatError):
    """Binary file failed its integrity check (corrupt or truncated)."""


class ShapeMismatchError(FormatError):
    """Stored parameter shapes disagree with the stored spec and schema."""
