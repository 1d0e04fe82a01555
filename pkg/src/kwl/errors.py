"""Exception hierarchy shared by all kwl modules."""


class KWLError(Exception):
    """Base class for every error raised by the package."""


# domain
class NonPositiveCap(KWLError):
    pass


class ThresholdOrder(KWLError):
    pass


class InvalidGrid(KWLError):
    pass


class InvalidParams(KWLError):
    pass


# operators
class BoxTooSmall(KWLError):
    pass


class LambdaBelowThreshold(KWLError):
    pass


# spectrum
class ZeroOffset(KWLError):
    pass


class DegenerateThreshold(KWLError):
    pass


class SpectrumTooShort(KWLError):
    pass


class DefiniteCase(KWLError):
    pass


class LambdaBelowLambda0(KWLError):
    pass


class SubspaceMismatch(KWLError):
    pass


# analysis
class GammaBelowOne(KWLError):
    pass


class BadExponent(KWLError):
    pass


# solver
class SeedZero(KWLError):
    pass


class NoCrossing(KWLError):
    pass


class EndpointNotBelowZero(KWLError):
    pass


class GeometryViolated(KWLError):
    pass


class PSBoundViolation(KWLError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class MaxItersExceeded(KWLError):
    """Solver ran out of iterations; ``diagnostics`` holds the last state."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class SolverFailure(KWLError):
    pass


# cli
class ConfigError(KWLError):
    def __init__(self, message, line=None, column=None):
        loc = ""
        if line is not None:
            loc = f"line {line}"
            if column is not None:
                loc += f", column {column}"
            loc += ": "
        super().__init__(loc + message)
        self.line = line
        self.column = column
