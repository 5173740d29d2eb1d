"""Exception hierarchy shared by every stage.

Input/configuration problems derive from ``ValueError`` so the CLI can map them
to exit status 2; everything else surfaces as status 1.
"""


class ReconError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ReconError, ValueError):
    pass


class EmptyMaskError(InvalidInputError):
    pass


class InvalidSpecError(InvalidInputError):
    pass


class ConfigError(InvalidInputError):
    pass


class ShapeError(InvalidInputError):
    pass


class FormatError(InvalidInputError):
    """A file does not follow its declared on-disk format."""


class ScheduleError(InvalidInputError):
    pass


class MissingScoresError(InvalidInputError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing scores for ids: " + ", ".join(self.missing))


class DivergenceError(ReconError, RuntimeError):
    def __init__(self, step, loss):
        self.step = step
        self.loss = loss
        super().__init__(f"non-finite loss {loss!r} at step {step}")
