"""Exception types shared across the package."""


class FuncoxError(Exception):
    """Base class for all package errors."""


class ConfigurationError(FuncoxError, ValueError):
    """Invalid tuning or construction parameters."""


class InputError(FuncoxError, ValueError):
    """Malformed or inconsistent data."""


class NumericalError(FuncoxError, ArithmeticError):
    """A factorization or fit broke down numerically."""
