"""Exception types raised across the package.

Every error derives from :class:`MindError` so the CLI can map any of them
to a nonzero exit status.
"""


class MindError(Exception):
    """Base class for all package errors."""


class InvalidShape(MindError, ValueError):
    pass


class NonFiniteInput(MindError, ValueError):
    pass


class NonDeterministic(MindError, RuntimeError):
    pass


class EmptyBin(MindError, ValueError):
    def __init__(self, k):
        super().__init__(f"TR bin {k} contains no frames")
        self.k = k


class InsufficientFrames(MindError, ValueError):
    pass


class WindowTooLong(MindError, ValueError):
    pass


class EmptySequence(MindError, ValueError):
    pass


class UnknownSubject(MindError, KeyError):
    pass


class UnknownExpert(MindError, IndexError):
    pass


class DegenerateGate(MindError, ArithmeticError):
    pass


class StaleCache(MindError, RuntimeError):
    pass


class ScheduleExhausted(MindError, ValueError):
    pass


class DegenerateTarget(MindError, ValueError):
    pass


class NeedMultipleSubjects(MindError, ValueError):
    pass


class EmptyReport(MindError, ValueError):
    pass


class InvalidSpec(MindError, ValueError):
    pass


class ConfigMismatch(MindError, ValueError):
    pass


class FormatError(MindError, ValueError):
    """Malformed AFT or checkpoint file."""


class IoError(MindError, OSError):
    """A file or directory could not be read or written."""
