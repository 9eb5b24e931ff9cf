"""Exception taxonomy shared by all conewave modules."""


class ConewaveError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(ConewaveError):
    """A point (or trajectory) left the region where the metric is defined."""


class ValidationError(ConewaveError):
    """An input violated a structural contract (shape, symmetry, positivity)."""


class DegeneracyError(ConewaveError):
    """A quantity required to be invertible or nonzero degenerated."""


class AccuracyError(ConewaveError):
    """A computed result missed its accuracy contract (e.g. integrator drift)."""


class CoverageError(ConewaveError):
    """Ray samples do not cover requested grid nodes or surface patches."""


class CausticError(ConewaveError):
    """Crossing characteristics detected; the ray chart is no longer single-valued."""


class ConjugatePointError(ConewaveError):
    """A Jacobi-propagated matrix became singular inside the requested window."""

    def __init__(self, message, location=None):
        super().__init__(message)
        self.location = location


class CFLError(ConewaveError):
    """Requested time step exceeds the stability bound."""


class NumericsError(ConewaveError):
    """NaN/Inf detected during evolution; carries the time stamp."""

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class ConfigError(ConewaveError):
    """Scenario configuration failed validation."""
