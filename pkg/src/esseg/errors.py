"""Exception hierarchy shared across the package.

The command line front end maps these onto distinct exit codes, so code
should raise the most specific type that applies.
"""


class EssegError(Exception):
    """Base class for package-specific errors."""


class ConfigError(EssegError):
    """Invalid configuration or hyperparameter combination (exit code 2)."""


class FormatError(EssegError):
    """Malformed binary file (exit code 3)."""


class BadMagicError(FormatError):
    """File does not start with the expected magic bytes."""


class TruncatedFileError(FormatError):
    """File ends before the payload declared in its header."""


class LabelRangeError(FormatError):
    """A stored label is outside [0, num_classes) and is not the ignore sentinel."""


class NumericalError(EssegError):
    """Non-finite values or numerically degenerate input (exit code 4)."""


class EmptyBatchError(NumericalError):
    """A loss was requested over a batch containing no labelled pixels."""
