"""Exception types shared across the package.

The CLI maps these onto exit codes: ``UsageError`` -> 2, ``InputError`` -> 3,
``NumericalError`` -> 4.  ``ConfigurationError`` is a programming/setup error
(mismatched caches, broken operators) and is reported as a usage error.
"""


class PetReconError(Exception):
    """Base class for all package errors."""


class UsageError(PetReconError, ValueError):
    """Unknown names, bad flags or malformed configuration documents."""


class InputError(PetReconError, ValueError):
    """Data that violates an operation's preconditions."""


class ConfigurationError(PetReconError, RuntimeError):
    """Inconsistent internal setup, e.g. a projector built for another grid."""


class NumericalError(PetReconError, ArithmeticError):
    """Non-finite values or a failed line search during optimization."""
