"""Exception hierarchy. CLI maps these onto exit codes."""


class EdgepatchError(Exception):
    """Base class for all package errors."""


class DatasetError(EdgepatchError):
    """Bad dataset root, layout, or contents."""


class SplitError(EdgepatchError):
    """Query/gallery split cannot be formed."""


class ModelError(EdgepatchError):
    """Shape/state problems in extractor, generator, or victim models."""


class EvalError(EdgepatchError):
    """Metric preconditions violated or reports not comparable."""


class ConfigError(EdgepatchError):
    """Malformed experiment configuration."""


class DependencyMissing(EdgepatchError):
    """A required upstream artifact (checkpoint, dataset) is absent."""


class TrainingDiverged(EdgepatchError):
    """Loss became non-finite; the last good checkpoint was persisted."""
