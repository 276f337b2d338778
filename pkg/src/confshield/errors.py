"""Exception types raised across the package."""


class ShieldError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ShieldError, ValueError):
    """Invalid or inconsistent configuration values."""


class DomainError(ShieldError, ValueError):
    """Input outside the domain of an operation (empty, zero power, ...)."""


class IntegrityError(ShieldError, ValueError):
    """Structural inconsistency in a dataset, e.g. duplicate slice keys."""


class ShapeError(ShieldError, ValueError):
    pass


class NumericError(ShieldError, ArithmeticError):
    pass


class FormatError(ShieldError, ValueError):
    """Bad magic bytes, unsupported version or truncated artifact file."""


class ZeroPerturbationError(DomainError):
    """An attack produced an all-zero perturbation that cannot be rescaled."""
