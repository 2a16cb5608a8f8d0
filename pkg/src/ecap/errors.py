"""Exception hierarchy shared by every ECAP module."""


class EcapError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(EcapError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class InsufficientDataError(EcapError, ValueError):
    """Too few (distinct) observations to carry out a fit or evaluation."""


class ConfigurationError(EcapError, ValueError):
    """Inconsistent configuration, e.g. a tuning grid without the side data it needs."""


class NumericError(EcapError, ArithmeticError):
    """A linear solve or quadrature failed to produce a usable answer."""
