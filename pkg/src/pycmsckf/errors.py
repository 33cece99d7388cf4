"""
Exceptions raised by the filter, the simulator and the harness
"""


class FilterError(RuntimeError):
    """
    Base class for every error raised by pycmsckf.

    The harness sets `step` to the index of the camera step that failed.
    """

    step = None


class WindowFull(FilterError):
    pass


class UnknownClone(FilterError):
    pass


class TooSoon(FilterError):
    pass


class StaleAccumulator(FilterError):
    pass


class NonPositiveDt(FilterError):
    pass


class DimensionMismatch(FilterError):
    pass


class TriangulationError(FilterError):
    pass


class LowParallax(TriangulationError):
    pass


class Diverged(TriangulationError):
    pass


class BehindCamera(TriangulationError):
    pass


class UnknownFrameRef(FilterError):
    pass


class RankDeficientFeature(FilterError):
    pass


class GlobalKeyframeTouched(FilterError):
    def __init__(self, keyframe_ids):
        self.keyframe_ids = sorted(keyframe_ids)
        super().__init__(f"track touches global keyframes {self.keyframe_ids}")


class SingularInnovation(FilterError):
    pass


class NonLocalBlock(FilterError):
    pass


class InvalidSpec(FilterError):
    pass


class ConfigError(FilterError):
    pass


class SingularMarginal(FilterError):
    pass


class MismatchedScenarios(FilterError):
    pass


class IoError(FilterError):
    pass
