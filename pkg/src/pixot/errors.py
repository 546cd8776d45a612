"""Exception hierarchy.

Domain errors (bad shapes, parameters, file contents) map to CLI exit code 1,
I/O failures to exit code 2.
"""


class PixotError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 1


class FormatError(PixotError, ValueError):
    """Bad magic, version or header field in a feature file."""


class TruncationError(PixotError, ValueError):
    """Feature file ends before its declared payload."""


class DataError(PixotError, ValueError):
    """Non-finite or otherwise invalid feature values."""


class ManifestError(PixotError, ValueError):
    pass


class PoolError(PixotError, ValueError):
    pass


class ShapeError(PixotError, ValueError):
    pass


class SizeError(PixotError, ValueError):
    pass


class MarginalError(PixotError, ValueError):
    pass


class ParamError(PixotError, ValueError):
    pass


class NumericalError(PixotError, ArithmeticError):
    pass


class EmptyIndexError(PixotError, IndexError):
    """Raised when an index would be built from an empty manifest."""


class RowError(PixotError, ValueError):
    """A cost-report entry has no candidates."""


class IoError(PixotError, OSError):
    exit_code = 2
