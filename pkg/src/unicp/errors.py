"""Exception hierarchy shared by all modules."""


class UnicpError(Exception):
    """Base class for library errors."""


class InvalidArgumentError(UnicpError, ValueError):
    pass


class ModelError(UnicpError):
    """A conditional model violated its contract (empty or wrong support)."""


class AbsoluteContinuityError(ModelError):
    pass


class ConfigurationError(UnicpError, ValueError):
    pass


class CapacityError(UnicpError):
    """Requested exhaustive enumeration is larger than the configured limit."""


class DiagnosticError(UnicpError):
    pass
