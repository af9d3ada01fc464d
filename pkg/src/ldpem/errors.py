"""Exception hierarchy shared by all modules."""


class LdpemError(Exception):
    """Base class for every error raised by this package."""


class InvalidInputError(LdpemError, ValueError):
    """Arguments violate a documented precondition."""


class DegenerateVectorError(LdpemError, ValueError):
    """A vector cannot be normalized because its positive mass is zero."""


class InfeasibleError(LdpemError, ValueError):
    """A distribution assigns zero probability to observed data (L = -inf)."""


class NotInvertibleError(LdpemError, ValueError):
    """A mechanism matrix is non-square, singular or too ill-conditioned."""


class CapacityError(LdpemError, ValueError):
    """An explicit table would be too large to materialize."""


class NonIdentifiableError(LdpemError, ValueError):
    """The mechanism carries no information about its input."""
