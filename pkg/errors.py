# masrc/errors.py
from pydantic import ValidationError


class MasrcError(Exception):
    """Base class for every error raised by the scene detection pipeline."""


class DataFormatError(MasrcError, ValueError):
    """Manifest or binary file does not match the on-disk format."""


class DegenerateInputError(MasrcError, ValueError):
    """Input that makes a quantity undefined, e.g. a zero-norm feature row."""


class ConfigError(MasrcError, ValueError):
    """Configuration that cannot be honoured with the data at hand."""


class ShapeMismatchError(MasrcError, ValueError):
    def __init__(self, message: str, slot: str | None = None):
        super().__init__(message)
        self.slot = slot


class NumericError(MasrcError, ArithmeticError):
    """Non-finite loss, gradient or parameter."""


EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2


def exit_code_for(exc: BaseException | None) -> int:
    if exc is None:
        return EXIT_OK
    if isinstance(exc, (DataFormatError, ShapeMismatchError, ConfigError,
                        DegenerateInputError, ValidationError, FileNotFoundError)):
        return EXIT_VALIDATION
    return EXIT_RUNTIME
