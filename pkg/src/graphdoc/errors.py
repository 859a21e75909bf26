"""Exception hierarchy shared across the package."""


class GraphDocError(Exception):
    """Base class for every error raised by graphdoc."""

    kind = "error"


class DimensionError(GraphDocError, ValueError):
    kind = "dimension"


class InvalidGraphError(GraphDocError, ValueError):
    kind = "invalid_graph"


class NonFiniteError(GraphDocError, FloatingPointError):
    kind = "non_finite"


class UsageError(GraphDocError, ValueError):
    kind = "usage"


class ReproducibilityError(GraphDocError, RuntimeError):
    kind = "reproducibility"


class DataError(GraphDocError, ValueError):
    kind = "data"


class CheckpointError(DataError):
    kind = "checkpoint"


class CheckpointFormatError(CheckpointError):
    kind = "checkpoint_format"


class CheckpointLengthError(CheckpointError):
    kind = "checkpoint_length"


class CheckpointShapeError(CheckpointError):
    kind = "checkpoint_shape"
