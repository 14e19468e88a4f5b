"""Exception hierarchy shared by all modules."""


class KacContactError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(KacContactError, ValueError):
    """Geometry, kernel or grid parameters are inconsistent."""


class ValidationError(KacContactError, ValueError):
    """User-supplied data (densities, configs, model specs) is malformed.

    ``field`` names the offending entry when one can be identified.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class NumericalError(KacContactError, ArithmeticError):
    """An integration or quadrature step produced unusable numbers."""

    def __init__(self, message, time=None, diagnostics=None):
        super().__init__(message)
        self.time = time
        self.diagnostics = diagnostics or {}
