"""Exception types shared across the package."""


class NotelabError(Exception):
    """Base class for all package errors."""


class ShapeError(NotelabError, ValueError):
    """Tensor op called with non-conforming shapes."""


class ContractError(NotelabError, ValueError):
    """A documented precondition was violated by the caller."""


class InputError(NotelabError, ValueError):
    """Bad input data (empty corpus, too few patients, ...)."""


class SchemaError(NotelabError, ValueError):
    """Persisted record does not match the expected schema."""


class SamplingError(NotelabError, ValueError):
    """Span sampling could not produce any pairs."""


class TrainingError(NotelabError, RuntimeError):
    """Training diverged or produced non-finite values."""


class ConfigError(NotelabError, ValueError):
    """Invalid or contradictory configuration."""


class CheckpointError(NotelabError, RuntimeError):
    """Checkpoint file could not be used."""


class UnsupportedVersionError(CheckpointError):
    """Checkpoint format version is not recognized."""


class CorruptCheckpointError(CheckpointError):
    """Checkpoint payload is truncated or fails its digest."""


class UndefinedMetricError(NotelabError, ValueError):
    """Metric is undefined for the given input (e.g. too few points)."""
