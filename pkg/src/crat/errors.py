"""Exception hierarchy shared by every subsystem."""


class CratError(Exception):
    """Base class for all library errors."""


class DimensionError(CratError, ValueError):
    pass


class ShapeError(CratError, ValueError):
    pass


class LabelError(CratError, ValueError):
    pass


class ClassIndexError(CratError, ValueError):
    pass


class ArgumentError(CratError, ValueError):
    pass


class FormatError(CratError):
    """Malformed binary file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class SplitViolationError(CratError):
    pass


class SamplingError(CratError):
    pass


class NormalizationError(CratError, ValueError):
    pass


class CheckpointError(CratError):
    pass


class NonFiniteError(CratError, FloatingPointError):
    pass


class TrainingDiverged(CratError):
    """Raised when a loss turns non-finite; carries the last good checkpoint."""

    def __init__(self, message: str, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ConfigError(CratError):
    """Invalid configuration; ``pointer`` is a JSON pointer to the offending key."""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer
        self.message = message
