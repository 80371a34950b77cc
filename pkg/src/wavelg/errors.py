"""Exception hierarchy shared by every module."""


class WaveError(Exception):
    """Base class for all library errors."""


class ShapeError(WaveError, ValueError):
    """Operand shapes do not conform."""


class IncompatibleError(ShapeError):
    """A target configuration cannot be built from a template bank."""


class InputError(WaveError, ValueError):
    """Invalid argument value (label range, config field, missing file...)."""


class StateError(WaveError, RuntimeError):
    """An operation was called in the wrong state, e.g. backward before forward."""


class TrainingError(WaveError, RuntimeError):
    """Training diverged."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class FormatError(WaveError):
    """A container or dataset file is malformed."""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass
