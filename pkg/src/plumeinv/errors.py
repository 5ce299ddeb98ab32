"""Exception types raised across the package.

Numerical failures derive from :class:`NumericalError` so the CLI can map
them to a single exit status.
"""


class PlumeInvError(Exception):
    """Base class for all package errors."""


class ConfigError(PlumeInvError, ValueError):
    """Invalid run configuration."""


class DimensionMismatch(PlumeInvError, ValueError):
    pass


class RankTooLarge(PlumeInvError, ValueError):
    pass


class ZeroReference(PlumeInvError, ValueError):
    pass


class StaleCache(PlumeInvError, RuntimeError):
    pass


class HashMismatch(PlumeInvError, IOError):
    pass


class Truncated(PlumeInvError, IOError):
    pass


class NumericalError(PlumeInvError, ArithmeticError):
    """Base class for failures of a numerical stage."""


class StabilityViolation(NumericalError):
    pass


class NonFinite(NumericalError):
    pass


class Diverged(NumericalError):
    pass


class LineSearchFailure(NumericalError):
    pass


class LanczosBreakdown(NumericalError):
    pass
