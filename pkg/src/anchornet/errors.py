"""Exception hierarchy.

Every error carries an ``exit_code`` so the CLI can map failures onto
its documented exit statuses (1 usage, 2 data error, 3 numerical failure).
"""


class AnchorNetError(Exception):
    exit_code = 2


class InvalidArgument(AnchorNetError, ValueError):
    pass


class GeometryUnderflow(InvalidArgument):
    """A layer receives an input smaller than its kernel (or an RF exceeds the input)."""


class OutOfBounds(InvalidArgument):
    """A patch or mapping would leave the input."""


class ParseError(AnchorNetError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VocabMismatch(AnchorNetError):
    pass


class CheckpointError(AnchorNetError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class NumericalError(AnchorNetError, ArithmeticError):
    exit_code = 3


class TrainingDiverged(NumericalError):
    pass
