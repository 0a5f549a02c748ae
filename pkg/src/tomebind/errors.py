"""Exception hierarchy shared by every tomebind module."""


class ToMeError(Exception):
    """Base class for all tomebind errors."""


# prompt analysis
class EmptyPrompt(ToMeError, ValueError):
    pass


class PromptTooLong(ToMeError, ValueError):
    pass


class NoEntityFound(ToMeError, ValueError):
    pass


# embedding surgery
class SpanOutOfRange(ToMeError, IndexError):
    pass


class ShapeMismatch(ToMeError, ValueError):
    pass


class EncoderFailure(ToMeError, RuntimeError):
    pass


# attention probe
class UnknownLayer(ToMeError, KeyError):
    pass


class CaptureNotArmed(ToMeError, RuntimeError):
    pass


class DegenerateMap(ToMeError, ValueError):
    pass


class NotNormalized(ToMeError, ValueError):
    pass


class EmptyAggregate(ToMeError, ValueError):
    pass


# optimizer
class MissingMap(ToMeError, KeyError):
    pass


class AdapterFailure(ToMeError, RuntimeError):
    pass


class NonFiniteLoss(ToMeError, FloatingPointError):
    pass


class WindowClosed(ToMeError, RuntimeError):
    pass


# pipeline
class ModelLoadFailure(ToMeError, RuntimeError):
    pass


class DiskWriteFailure(ToMeError, OSError):
    pass


class EmptyInput(ToMeError, ValueError):
    pass


# evaluation
class EmptyField(ToMeError, ValueError):
    pass


class BadRubric(ToMeError, ValueError):
    pass


class ScorerUnavailable(ToMeError, RuntimeError):
    pass


class MalformedScore(ToMeError, ValueError):
    pass


class DetectorUnavailable(ToMeError, RuntimeError):
    pass
