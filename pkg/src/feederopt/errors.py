"""Exception types shared across the package.

Every error raised on bad user input derives from ValidationError so the
CLI can map the whole family to a single exit code. Numerical failures
derive from NumericalError.
"""


class FeederOptError(Exception):
    """Base class for all package errors."""


class ValidationError(FeederOptError):
    """Bad input data or parameters."""


class CycleDetected(ValidationError):
    pass


class DisconnectedNode(ValidationError):
    pass


class MissingLine(ValidationError):
    pass


class UnknownNode(ValidationError):
    pass


class BadParameter(ValidationError):
    pass


class OutOfRange(ValidationError):
    pass


class BadBounds(ValidationError):
    pass


class EmptyKeptSet(ValidationError):
    pass


class BadCardinality(ValidationError):
    pass


class ScenarioNetworkMismatch(ValidationError):
    pass


class InjectionExceedsNameplate(ValidationError):
    pass


class ZeroResistance(ValidationError):
    pass


class NumericalError(FeederOptError):
    """Numerical breakdown inside a solver."""


class SingularSchur(NumericalError):
    pass


class RankDeficient(NumericalError):
    pass


class NoKktCase(NumericalError):
    """No KKT-consistent candidate found in the cone-box projection.

    Should be unreachable for well-posed instances; the message carries a
    JSON dump of the offending instance for reproduction.
    """


class NotConverged(FeederOptError):
    """A solve hit its iteration cap before meeting the stopping rule."""
