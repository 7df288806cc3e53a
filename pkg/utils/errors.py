"""
Error types for the LoGoNet toolkit
Every failure the library raises on purpose derives from LogoError and knows
the exit code the command line reports for it
"""

import functools
import logging
import sys

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DATA = 2
EXIT_SHAPE = 3


class LogoError(Exception):
    """Base class for all expected failures"""
    exit_code = EXIT_DATA


class ShapeError(LogoError, ValueError):
    """Tensor extents or channel counts do not line up"""
    exit_code = EXIT_SHAPE


class ArgumentError(LogoError, ValueError):
    """An argument is outside its documented domain"""
    exit_code = EXIT_CONFIG


class PartitionError(LogoError, ValueError):
    """A cube cannot be split into (or rebuilt from) N sub-cubes"""
    exit_code = EXIT_DATA


class ConfigError(LogoError, ValueError):
    """A configuration field is unknown or invalid"""
    exit_code = EXIT_CONFIG

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"config field '{field}': {message}")


class FormatError(LogoError, IOError):
    """A file is missing, truncated or carries the wrong magic"""
    exit_code = EXIT_DATA

    def __init__(self, path, message):
        self.path = str(path)
        super().__init__(f"{path}: {message}")


class CheckpointMismatchError(LogoError, KeyError):
    """A checkpoint does not fit the model it is loaded into"""
    exit_code = EXIT_DATA

    def __init__(self, missing=(), unexpected=(), mismatched=()):
        self.missing = sorted(missing)
        self.unexpected = sorted(unexpected)
        self.mismatched = sorted(mismatched)
        parts = []
        if self.missing:
            parts.append("missing parameters: " + ", ".join(self.missing))
        if self.unexpected:
            parts.append("unexpected parameters: " + ", ".join(self.unexpected))
        if self.mismatched:
            parts.append("shape mismatch: " + ", ".join(self.mismatched))
        super().__init__("; ".join(parts) or "checkpoint mismatch")

    def __str__(self):
        return self.args[0]


class NonFiniteError(LogoError, ArithmeticError):
    """A forward op produced NaN or Inf from finite inputs"""
    exit_code = EXIT_DATA


def exit_on_error(func):
    """
    Decorator for command handlers
    Turns a LogoError into a message on stderr and its exit code

    Usage:
        @exit_on_error
        def cmd_infer(args):
            ...
            return EXIT_OK
    """
    @functools.wraps(func)
    def wrapper(*args, **kwargs):
        try:
            result = func(*args, **kwargs)
            return EXIT_OK if result is None else result
        except LogoError as e:
            logger.debug("command %s failed", func.__name__, exc_info=True)
            print(f"Error in {func.__name__}: {str(e)}", file=sys.stderr)
            return e.exit_code
    return wrapper
