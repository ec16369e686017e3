"""Exception hierarchy shared across the engine."""


class QatError(Exception):
    """Base class for every error raised by qat4."""


class ShapeError(QatError, ValueError):
    pass


class DomainError(QatError, ValueError):
    pass


class PoisonedInputError(QatError, ValueError):
    """Non-finite values reached the quantizer."""


class CorruptionError(QatError, ValueError):
    """Integer levels or packed nibbles outside the valid 4-bit range."""


class StateError(QatError, RuntimeError):
    pass


class FormatError(QatError, ValueError):
    """A checkpoint or log file does not match the expected layout."""


class CorruptDataError(QatError, ValueError):
    """A dataset file has the wrong size or invalid labels."""


class DivergenceError(QatError, FloatingPointError):
    """NaN/Inf detected during training."""

    def __init__(self, step, where):
        super().__init__(f"non-finite values in {where} at step {step}")
        self.step = step
        self.where = where


class LogParseError(QatError, ValueError):
    def __init__(self, path, lineno, reason):
        super().__init__(f"{path}:{lineno}: {reason}")
        self.lineno = lineno
