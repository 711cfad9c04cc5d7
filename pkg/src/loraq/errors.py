"""Exception hierarchy shared across the toolkit."""


class LoraqError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(LoraqError):
    """Operand dimensions are inconsistent."""


class ParameterError(LoraqError):
    """An argument is outside its documented domain."""


class BudgetError(ParameterError):
    """A bit budget does not admit a usable rank."""


class UnknownFormatError(ParameterError):
    """Requested quantization format name is not registered."""


class NumericError(LoraqError):
    """A computation produced non-finite values or was aborted.

    ``trace`` and ``last_iterate`` carry diagnostics from iterative
    optimizers: the loss history up to the failure and the last iterate
    whose loss was still finite.
    """

    def __init__(self, message, *, trace=None, last_iterate=None):
        super().__init__(message)
        self.trace = trace
        self.last_iterate = last_iterate


class ConvergenceError(NumericError):
    """An iterative routine hit its iteration cap.

    ``residual`` records the best achieved residual when available.
    """

    def __init__(self, message, *, residual=None, **kwargs):
        super().__init__(message, **kwargs)
        self.residual = residual


class FormatError(LoraqError):
    """A codec bitstream or serialized structure is malformed."""


class FileFormatError(FormatError):
    """A file does not follow its documented byte layout."""


class CorruptFileError(FileFormatError):
    """A file is truncated or self-inconsistent.

    ``offset`` is the byte position at which reading failed.
    """

    def __init__(self, message, *, offset=None):
        super().__init__(message)
        self.offset = offset


class VersionError(FileFormatError):
    """A file declares a version newer than this library understands."""
