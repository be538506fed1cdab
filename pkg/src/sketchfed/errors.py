"""Exception types raised across the package."""


class SketchFedError(Exception):
    """Base class for all package errors."""


class ConfigurationError(SketchFedError, ValueError):
    """A configuration object violates its invariants."""


class ShapeError(SketchFedError, ValueError):
    """Vector or sketch dimensions do not agree."""


class IncompatibleSketchError(SketchFedError, ValueError):
    """Two sketches with different configs (or seeds) were combined."""


class BoundsError(SketchFedError, IndexError):
    """A coordinate index lies outside ``[0, dim)``."""


class ParameterError(SketchFedError, ValueError):
    """An argument lies outside its admissible range."""


class AggregationError(SketchFedError, ValueError):
    """Aggregation received no inputs or mismatched inputs."""


class StateError(SketchFedError, ValueError):
    """Optimizer state is inconsistent with the supplied config."""


class DataError(SketchFedError, ValueError):
    """A data shard is empty or malformed."""


class PartitionError(SketchFedError, ValueError):
    """A dataset cannot be partitioned as requested."""
