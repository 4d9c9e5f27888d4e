"""Exception hierarchy shared across the package."""


class PerfInfError(Exception):
    """Base class for all package errors."""


class ConfigError(PerfInfError, ValueError):
    """Invalid or inconsistent configuration."""


class NumericalError(PerfInfError, ArithmeticError):
    """A numerical routine could not produce a valid result."""


class SamplingError(NumericalError):
    """Rejection sampler exhausted its budget of consecutive rejections."""


class SolverError(NumericalError):
    """An optimizer failed (non-SPD Hessian, no convergence, singular system)."""
