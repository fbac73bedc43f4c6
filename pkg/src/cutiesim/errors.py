"""Exception hierarchy shared by all cutiesim modules."""


class CutieError(Exception):
    """Base class for every error raised by cutiesim."""


class InvalidCodeword(CutieError, ValueError):
    pass


class EncodingRange(CutieError, ValueError):
    pass


class TensorIOError(CutieError, IOError):
    pass


class FormatError(TensorIOError):
    pass


class TruncatedPayload(TensorIOError):
    pass


class DimOverflow(TensorIOError):
    pass


class ManifestError(CutieError, ValueError):
    pass


class NotCounted(CutieError, ValueError):
    """Raised when asking for the op count of a layer that has none (pooling)."""


class DegenerateChannel(CutieError, ValueError):
    pass


class UnsupportedGraph(CutieError, ValueError):
    pass


class QueueOverflow(CutieError):
    pass


class ValidationError(CutieError, ValueError):
    """A network does not map onto the architecture; ``violations`` lists why."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class ShapeError(CutieError, ValueError):
    pass


class CapacityError(CutieError):
    pass


class Undefined(CutieError, ValueError):
    pass


class EmptyTrace(CutieError, ValueError):
    pass
