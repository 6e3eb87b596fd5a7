"""Exception hierarchy shared across the package."""


class MaestroError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(MaestroError):
    """Invalid or inconsistent configuration (bad key, type, or value)."""


class AssignmentError(MaestroError):
    """A partition does not assign every vertex of the hypergraph."""


class FeasibilityError(MaestroError):
    """A single requested move violates block caps."""


class InfeasibilityError(MaestroError):
    """No feasible solution exists (caps vs. circuit size, budget vs. floors)."""


class CalibrationError(MaestroError):
    """Threshold search could not reach the requested operating point."""


class DomainError(MaestroError, ValueError):
    """An argument is outside the mathematical domain of an operation."""


class FitError(MaestroError):
    """Model fit failed: degenerate design or data inconsistent with the model."""


class AuthenticationError(MaestroError):
    """Sealed envelope failed authentication on open."""


class ProtocolError(MaestroError):
    """Batch results do not correspond to a dispatched batch."""


class PairingError(MaestroError):
    """Paired episode records disagree on seed or workload."""


class NumericError(MaestroError):
    """A numeric routine failed to converge."""
