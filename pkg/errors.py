"""
Exception hierarchy for the quantum link toolkit.

Every error raised on purpose by the simulation, fitting and harness
modules derives from LinkSimError, so the CLI and the web app can map
them to exit codes / HTTP statuses in one place.
"""

from typing import List, Optional


class LinkSimError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(LinkSimError, ValueError):
    """Operands live in incompatible Hilbert spaces or have the wrong shape."""


class DomainError(LinkSimError, ValueError):
    """A parameter is outside the physical domain of a formula."""


class ExtrapolationError(DomainError):
    """A requested value lies outside the range covered by a fit."""


class FitError(LinkSimError):
    """A least-squares or mixture fit failed or is degenerate."""


class IntegrationError(LinkSimError):
    """The master-equation integrator could not advance."""

    def __init__(self, message: str, failed_at: Optional[float] = None):
        super().__init__(message)
        self.failed_at = failed_at


class MitigationError(LinkSimError):
    """The assignment matrix cannot be inverted reliably."""

    def __init__(self, message: str, condition_number: float = float('inf')):
        super().__init__(message)
        self.condition_number = condition_number


class EstimationError(LinkSimError):
    """Maximum-likelihood reconstruction did not converge."""

    def __init__(self, message: str, iterations: int = 0, last_log_likelihood: float = float('nan')):
        super().__init__(message)
        self.iterations = iterations
        self.last_log_likelihood = last_log_likelihood


class ConfigError(LinkSimError, ValueError):
    """Configuration file is malformed or violates a model invariant."""

    def __init__(self, message: str, fields: Optional[List[str]] = None):
        super().__init__(message)
        self.fields = fields or []
