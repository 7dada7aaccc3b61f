"""Exception types shared across the package.

CLI exit codes: 0 success, 2 config error, 3 training error, 4 integrity
error. Shape/input errors raised below the CLI surface map to config errors
when they reach it.
"""


class TriadaptError(Exception):
    """Base class for all package errors."""


class ConfigError(TriadaptError):
    """Invalid configuration: bad bounds, unknown keys, dimension mismatches."""

    exit_code = 2


class InputError(TriadaptError):
    """Invalid runtime input (out-of-vocabulary token, wrong image resolution)."""

    exit_code = 2


class ShapeError(TriadaptError):
    """Tensor shape or structure mismatch between arguments."""

    exit_code = 2


class TrainingError(TriadaptError):
    """Training diverged or produced a non-finite loss."""

    exit_code = 3


class IntegrityError(TriadaptError):
    """Checkpoint file corrupt, truncated, or from a mismatched architecture."""

    exit_code = 4
