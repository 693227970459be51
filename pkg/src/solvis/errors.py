"""Typed exceptions raised across the pipeline."""


class SolvisError(Exception):
    """Base class for every error this package raises on purpose."""


# raster
class CropTooLarge(SolvisError, ValueError):
    pass


class BadWindow(SolvisError, ValueError):
    pass


class BadThresholds(SolvisError, ValueError):
    pass


# preprocess
class NoCircleFound(SolvisError):
    pass


class DegenerateRoi(SolvisError, ValueError):
    pass


# superposition analysis
class MaskShapeMismatch(SolvisError, ValueError):
    pass


class EmptyGroundTruth(SolvisError, ValueError):
    pass


# classifier
class DegenerateTrainingSet(SolvisError, ValueError):
    pass


class BadFeature(SolvisError, ValueError):
    pass


class ModelFormatError(SolvisError, ValueError):
    pass


# synthgen
class BadSceneParams(SolvisError, ValueError):
    pass


# config
class ConfigError(SolvisError, ValueError):
    pass


# protocol
class ProtocolError(SolvisError):
    pass


class FrameTruncated(ProtocolError):
    pass


class UnknownKind(ProtocolError):
    pass


class FrameTooLarge(ProtocolError):
    pass


class ProtocolViolation(ProtocolError):
    pass


class StepTimeout(ProtocolError):
    def __init__(self, state, timeout=None):
        self.state = state
        self.timeout = timeout
        msg = f"no reply in state {getattr(state, 'value', state)}"
        if timeout is not None:
            msg += f" after {timeout:g} s"
        super().__init__(msg)


class AnalysisFailed(SolvisError):
    def __init__(self, cause):
        self.cause = cause
        super().__init__(f"analysis failed: {type(cause).__name__}: {cause}")
