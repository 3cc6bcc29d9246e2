"""Exception hierarchy shared by all pipeline stages."""


class PlencalError(Exception):
    """Base class for every error raised by the toolkit."""


class DegenerateDepth(PlencalError):
    """Object point lies on or in front of the main lens focal plane."""


class NonPositiveVirtualDepth(PlencalError):
    pass


class NoConvergence(PlencalError):
    pass


class OutOfMicroImage(PlencalError):
    pass


class InsufficientVisibility(PlencalError):
    pass


class SingularCluster(PlencalError):
    pass


class DegenerateGeometry(PlencalError):
    pass


class InsufficientMatches(PlencalError):
    pass


class RegistrationFailed(PlencalError):
    pass


class NotConverged(PlencalError):
    pass


class ZeroBaseline(PlencalError):
    pass


class RankDeficient(PlencalError):
    pass


class NegativeParameter(PlencalError):
    pass


class SingularSystem(PlencalError):
    pass


class Diverged(PlencalError):
    pass


class NonFiniteDepth(PlencalError):
    pass


class ZeroReference(PlencalError):
    pass


class LengthMismatch(PlencalError):
    pass


class InvalidConfig(PlencalError):
    """Configuration value rejected; ``field`` names the offending key."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class PipelineFailure(PlencalError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the
    original error."""

    def __init__(self, stage, message):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
