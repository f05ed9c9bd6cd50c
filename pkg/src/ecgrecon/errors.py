"""Exception hierarchy shared across the pipeline.

Exit-code mapping (see cli): ConfigError -> 2, DependencyError -> 3,
DataError -> 4, anything else -> 5.
"""


class PipelineError(Exception):
    """Base class for errors with a machine-parseable category."""

    category = "internal"
    exit_code = 5


class ConfigError(PipelineError):
    category = "config"
    exit_code = 2


class DependencyError(PipelineError):
    category = "dependency"
    exit_code = 3


class DataError(PipelineError):
    category = "data"
    exit_code = 4


class HeaderParseError(DataError):
    """Malformed WFDB header line; carries the 1-based line number."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class UnsupportedFormatError(DataError):
    """WFDB signal format other than 16."""


class TruncationError(DataError):
    """Signal file byte length does not match the header."""


class ChecksumError(DataError):
    """Per-signal checksum mismatch (verification enabled)."""


class SchemaError(DataError):
    """Metadata CSV missing a required column."""


class LeakageError(DataError):
    """A patient appears in more than one split."""


class FilterSpecError(ConfigError):
    """Filter parameters incompatible with the sampling rate."""


class UnsupportedRateError(DataError):
    """Resampling ratio is not an integer."""


class ShapeError(ValueError):
    """Tensor operation received incompatible shapes."""

    def __init__(self, op, *shapes):
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")


class MetricUndefinedError(DataError):
    """Metric undefined for the given inputs (e.g. constant target)."""
