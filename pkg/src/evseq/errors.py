"""Exception types shared across the package.

Every error raised on a user-facing path carries a short machine-parsable
code (used by the CLI as an exit prefix) plus a human-readable message.
"""


class EvseqError(Exception):
    """Base class for package errors."""

    code = "INTERNAL"


class ParseError(EvseqError):
    """A text input file could not be parsed; message names the line."""

    code = "PARSE"


class EmptyLogError(EvseqError):
    """An event log contains no events at all."""

    code = "EMPTY_LOG"


class NoKnownEventsError(EvseqError):
    """Every event in a log is absent from the vocabulary."""

    code = "NO_KNOWN_EVENTS"


class TooShortError(EvseqError):
    """A sequence is shorter than the operation requires."""

    code = "TOO_SHORT"


class NonFiniteError(EvseqError):
    """A parameter, input, or intermediate value is NaN or infinite."""

    code = "NON_FINITE"


class FormatError(EvseqError):
    """A binary file is truncated or structurally malformed."""

    code = "FORMAT"


class VersionError(FormatError):
    """A binary file has the wrong magic bytes or format version."""

    code = "VERSION"


class ConfigError(EvseqError):
    """A configuration value is missing, malformed, or out of range."""

    code = "CONFIG"
