"""Exception hierarchy shared by all phaseplane modules."""


class PhaseplaneError(Exception):
    """Base class for every error raised by this package."""


# geometry
class NotNonTrivial(PhaseplaneError):
    pass


class NotQuasiconformal(PhaseplaneError):
    pass


class Singular(PhaseplaneError):
    pass


class EmptySet(PhaseplaneError):
    pass


# whitney
class EmptyRange(PhaseplaneError):
    pass


class DegenerateMap(PhaseplaneError):
    pass


class SupportTouchesGamma(PhaseplaneError):
    pass


# fields / cut-offs
class BadShape(PhaseplaneError):
    pass


class SetTooSmallForGrid(PhaseplaneError):
    pass


class EmptyProjection(PhaseplaneError):
    pass


class GridTooCoarse(PhaseplaneError):
    pass


# forms
class GridMismatch(PhaseplaneError):
    pass


class UnverifiedCutoff(PhaseplaneError):
    pass


class SupportLeak(PhaseplaneError):
    pass


class TruncationTooCoarse(PhaseplaneError):
    pass


class TailTooLarge(PhaseplaneError):
    pass


class NotUnitVector(PhaseplaneError):
    pass


# tiles / selection
class InvalidTree(PhaseplaneError):
    pass


class EmptyDictionary(PhaseplaneError):
    pass


class NotConvex(PhaseplaneError):
    pass


class HypothesisViolated(PhaseplaneError):
    pass


class NonTermination(PhaseplaneError):
    pass


# pipeline
class ConfigInvalid(PhaseplaneError):
    pass


class StageFailed(PhaseplaneError):
    def __init__(self, stage, message):
        super().__init__(f"stage {stage!r} failed: {message}")
        self.stage = stage
