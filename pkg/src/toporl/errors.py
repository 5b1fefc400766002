"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, I/O problems
exit 2, contract violations exit 3.
"""


class ToporlError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(ToporlError):
    """Operand dimensions do not line up."""


class ConfigError(ToporlError):
    """A configuration value is out of its legal range or unknown."""


class ContractError(ToporlError):
    """A documented precondition was violated by the caller."""


class NumericalError(ToporlError):
    """A forward or backward pass produced NaN or Inf."""


class DegenerateDistributionError(ToporlError):
    """A distribution has no probability mass left (fully masked)."""


class GenerationError(ToporlError):
    """World generation could not satisfy its constraints."""


class SamplingError(ToporlError):
    """Episode sampling could not satisfy its constraints."""
