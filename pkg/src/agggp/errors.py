"""Exception types shared across the package.

Three failure categories cover everything the library raises on purpose:
bad inputs, numerical breakdowns, and work that would exceed a configured
resource budget. The command line maps them to exit codes (input errors
exit 1, numerical and resource errors exit 2).
"""


class AggGPError(Exception):
    """Base class for errors raised deliberately by this package."""


class InputError(AggGPError):
    """Malformed or inconsistent user input (shapes, files, options)."""


class NumericalError(AggGPError):
    """A computation lost numerical validity (failed factorization,
    non-finite objective or gradient, negative variance beyond tolerance)."""


class ResourceError(AggGPError):
    """The requested computation exceeds a configured size or memory budget."""
