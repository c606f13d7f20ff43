"""Exception hierarchy for the whole package.

Every failure surfaced by the public API is one of these subclasses, so
callers (and the CLI) can map errors to exit codes without string matching.
"""


class StylerError(Exception):
    """Base class for all package errors."""


class DimensionError(StylerError):
    """Tensor or image shapes do not satisfy an operation's contract."""


class NumericError(StylerError):
    """A NaN or Inf appeared where only finite values are allowed."""


class ContractError(StylerError):
    """A structural precondition was violated (non-scalar loss, non-unit embedding)."""


class DegenerateInputError(StylerError):
    """Input is mathematically degenerate (zero-norm vector, identical prompts)."""


class InputError(StylerError):
    """User-supplied data is invalid (empty prompt, out-of-range pixels, bad file)."""


class StateError(StylerError):
    """An operation requires state that has not been established yet."""


class ConfigError(StylerError):
    """A run configuration field is missing or out of range."""
