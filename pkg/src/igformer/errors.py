"""Exception types shared across the package.

The CLI maps these onto exit codes: user-facing problems (ConfigError,
ParseError) exit 1, broken internal invariants exit 2.
"""


class ConfigError(ValueError):
    """A setting is out of range or inconsistent with the rest of the config."""


class ShapeError(ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class ParseError(ValueError):
    """An input file does not follow its declared layout."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class NumericError(ArithmeticError):
    """A forward value left the finite-float domain (NaN or Inf)."""


class UsageError(RuntimeError):
    """An API was called in a state it does not support."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries a parameter/gradient norm report."""
