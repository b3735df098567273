"""Exception taxonomy shared across the package.

Every error raised by mmfuse derives from :class:`MmfuseError`, so callers
(and the CLI) can catch one type and map it to a diagnostic.
"""


class MmfuseError(Exception):
    """Base class for all mmfuse errors."""


class FormatError(MmfuseError):
    """A binary file does not carry the expected magic or version."""


class SchemaError(MmfuseError):
    """Structured data disagrees with the configured schema."""


class CorruptionError(MmfuseError):
    """A file is truncated or its payload is inconsistent with its header."""


class ParseError(MmfuseError):
    """A text input (manifest, config) could not be parsed."""

    def __init__(self, message: str, line_number: int | None = None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class ValidationError(MmfuseError):
    """Data violates a domain invariant (NaN in present rows, bad mask, ...)."""


class ConfigurationError(MmfuseError):
    """A configuration value is unknown, missing, or inconsistent."""


class ContractError(MmfuseError):
    """An API precondition was violated by the caller."""


class DataError(MmfuseError):
    """Frame content is out of the declared domain (e.g. state id too large)."""


class NumericError(MmfuseError):
    """A non-finite value appeared where finite arithmetic is required."""


class TooShortError(MmfuseError):
    """A record does not span a single window of the requested duration."""


class DegenerateWindowError(MmfuseError):
    """A window duration covers zero frames at the given rate."""


class DegenerateStatisticsError(MmfuseError):
    """Normalization statistics were requested over zero present frames."""


class EmptyWindowError(MmfuseError):
    """A fused sequence has no unmasked rows to attend to or pool over."""


class EmptyVoteError(MmfuseError):
    """A vote was requested over an empty prediction list."""


class DatasetError(MmfuseError):
    """A dataset is unusable as a whole (e.g. every record too short)."""


class AggregationError(MmfuseError):
    """Multi-run aggregation was requested with fewer than two runs."""
