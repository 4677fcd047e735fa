"""Exception hierarchy shared by every flexquant module."""


class FlexQuantError(Exception):
    """Base class for all package errors."""


class ModelError(FlexQuantError):
    pass


class UnstableModel(ModelError):
    pass


class DimensionMismatch(ModelError):
    pass


class NonPSDCovariance(ModelError):
    pass


class LengthMismatch(FlexQuantError):
    pass


class NoConvergence(FlexQuantError):
    pass


class DomainError(FlexQuantError, ValueError):
    pass


class SolverFailure(FlexQuantError):
    """Raised when a conic program does not reach an optimal status."""

    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class InfeasibleBaseline(FlexQuantError):
    pass


class InfeasibleBand(FlexQuantError):
    """A fixed policy leaves an empty power band at some timestep."""

    def __init__(self, message, steps=()):
        super().__init__(message)
        self.steps = tuple(steps)


class DegenerateInput(FlexQuantError, ValueError):
    pass


class ShapeMismatch(FlexQuantError, ValueError):
    pass


class MissingHour(FlexQuantError, KeyError):
    pass


class ParseError(FlexQuantError):
    pass


class SchemaError(FlexQuantError):
    pass


class ConfigError(FlexQuantError):
    pass
