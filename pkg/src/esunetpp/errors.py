"""Exception types shared across the package.

The CLI maps :class:`ValidationError` subclasses to exit code 2 and every
other :class:`EsuppError` to exit code 3.
"""


class EsuppError(Exception):
    """Base class for all package errors."""


class ValidationError(EsuppError, ValueError):
    """Bad input, configuration or file contents."""


class ShapeError(ValidationError):
    """Tensor shapes do not agree with an operation's contract."""


class ParameterError(ValidationError):
    """A scalar hyperparameter is outside its allowed range."""


class ContractError(ValidationError):
    """A precondition on values (not shapes) was violated."""


class ConfigError(ValidationError):
    """A network or run configuration is inconsistent."""


class FormatError(ValidationError):
    """A serialized file is malformed, truncated or unsupported."""


class IntegrityError(ValidationError):
    """A stored hash does not match the content it describes."""


class EmptyBoundaryError(ContractError):
    """A mask has no boundary pixels, so no distance map exists."""


class DegenerateMapError(ContractError):
    """A weight map has no dynamic range to normalize."""


class SizeLimitError(ContractError):
    """A problem exceeds the configured size budget."""


class NoLiverError(EsuppError):
    """The liver mask is empty; the tumor phase has nothing to crop."""


class DivergenceError(EsuppError):
    """Training produced a non-finite loss."""
