"""Exceptions shared across the package."""


class SubquantError(Exception):
    """Base class for errors raised by this package."""


class BadInputError(SubquantError):
    """User-supplied file or configuration is missing or malformed (CLI exit code 2)."""
