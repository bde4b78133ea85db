"""Exception taxonomy shared across the package.

The CLI maps ValidationError to exit code 2 and the numerical family
(NumericalError and subclasses) to exit code 3.
"""


class NpvolError(Exception):
    """Base class for all package errors."""


class DimensionError(NpvolError):
    """Shape or length of an input does not match the declared dimension."""


class ValidationError(NpvolError):
    """A config, file, or constructed object violates its invariants."""


class NumericalError(NpvolError):
    """A numerical computation left its domain of validity."""


class SingularMatrixError(NumericalError):
    """A matrix expected to be safely positive definite has an eigenvalue
    at or below the configured floor (near the boundary of the manifold)."""


class ConvergenceError(NumericalError):
    """An iteration exceeded its cap before reaching tolerance."""

    def __init__(self, msg, last_residual=None):
        super().__init__(msg)
        self.last_residual = last_residual


class SimulationError(NumericalError):
    """Path simulation produced a non-finite state."""


class OptimizerError(NumericalError):
    """Optimizer received a non-finite gradient."""


class TrainingError(NumericalError):
    """Training loss became non-finite."""
