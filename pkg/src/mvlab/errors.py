"""Exception hierarchy. Each class maps to one failure mode of the public operations."""


class MVLabError(Exception):
    """Base class for all library errors."""


class InvalidParameter(MVLabError, ValueError):
    pass


class InstanceTooLarge(MVLabError):
    pass


class IncompatibleFlows(MVLabError, ValueError):
    pass


class DivergentNorm(MVLabError):
    pass


class DegenerateDiffusion(MVLabError):
    def __init__(self, message, probe=None):
        super().__init__(message)
        self.probe = probe


class EnvelopeViolation(MVLabError):
    def __init__(self, message, probe=None):
        super().__init__(message)
        self.probe = probe


class SimulationDiverged(MVLabError):
    def __init__(self, message, step=None, particle=None):
        super().__init__(message)
        self.step = step
        self.particle = particle


class NoContractionDetected(MVLabError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class DiffusionBandViolation(MVLabError):
    pass


class DegenerateCovariance(MVLabError):
    pass


class QuadratureUnresolved(MVLabError):
    pass


class SolverDiverged(MVLabError):
    pass


class NoAdmissibleLambda(MVLabError):
    pass


class ExtrapolationRefused(MVLabError, ValueError):
    pass


class ConfigError(MVLabError, ValueError):
    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key
