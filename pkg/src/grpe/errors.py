"""Exception classes shared across the package, with CLI exit codes.

Plain ``ValueError`` is used for ordinary precondition violations; the
classes below exist where callers (mainly the CLI) need to distinguish
failure categories.
"""


class GrpeError(Exception):
    """Base class for package-specific failures."""


class ShapeError(GrpeError):
    """Operands have incompatible or invalid dimensions."""


class ConfigError(GrpeError):
    """Invalid model, training, or command configuration."""


class NumericError(GrpeError):
    """Non-finite values, divergence, or a solver that failed to converge."""


class GraphParseError(GrpeError):
    """Malformed graph file; the message names the offending line."""


class CheckpointError(GrpeError):
    """Checkpoint file is unreadable or inconsistent with the model."""


class CheckFailure(GrpeError):
    """A self-verification suite reported a deviation above threshold."""


# CLI exit codes, one per failure class (0 = success, 1 = unexpected error).
EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_CHECK = 5
