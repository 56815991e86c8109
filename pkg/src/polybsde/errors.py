"""Exception hierarchy shared by every polybsde module."""


class PolyBSDEError(Exception):
    """Base class for all library errors."""


class SimulationError(PolyBSDEError):
    """A forward coefficient evaluated to a non-finite value."""

    def __init__(self, message, path=None, step=None):
        super().__init__(message)
        self.path = path
        self.step = step


class CapacityError(PolyBSDEError):
    """The requested ensemble would exceed the configured memory cap."""


class SingularConstantError(PolyBSDEError, ValueError):
    """c2 is undefined because L_z = 0 while L or L_x is positive."""


class StepTooLargeError(PolyBSDEError, ValueError):
    """The step size violates a scheme step restriction."""

    def __init__(self, message, bound):
        super().__init__(message)
        self.bound = bound


class NotApplicableError(PolyBSDEError, ValueError):
    """Operation requested outside its domain (e.g. taming with m = 1)."""


class UnderdeterminedError(PolyBSDEError, ValueError):
    """Fewer samples than basis functions."""


class DataError(PolyBSDEError, ValueError):
    """Non-finite regression target."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path


class NonConvergenceError(PolyBSDEError):
    """The implicit solver exhausted its iteration budget."""

    def __init__(self, message, residual):
        super().__init__(message)
        self.residual = residual


class BlowUpError(PolyBSDEError):
    """A backward iterate became non-finite at time step ``step``."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class ConfigError(PolyBSDEError, ValueError):
    """Invalid scheme or experiment configuration."""


class InsufficientDataError(PolyBSDEError, ValueError):
    """Too few valid points to fit a rate."""


class NotConvergentError(PolyBSDEError, ValueError):
    """A non-negative slope was passed where convergence is required."""


class ParseError(PolyBSDEError, ValueError):
    """Malformed results file; ``row`` is the 1-based line number."""

    def __init__(self, message, row=None):
        super().__init__(message)
        self.row = row
