"""Exception hierarchy shared across the package."""


class BiaslessNasError(Exception):
    """Base class for all package errors."""


class ConfigError(BiaslessNasError):
    """Invalid configuration value or file."""


class SchemaError(BiaslessNasError):
    """Token sequence does not match the search-space token schema."""


class ConstraintError(BiaslessNasError):
    """A decoded candidate violates a search-space constraint."""


class SizeError(BiaslessNasError):
    """Enumeration or table size exceeds the supported bound."""


class PresetNotFoundError(BiaslessNasError, LookupError):
    """Unknown fixed-point or preset name."""


class PlanError(BiaslessNasError):
    """Batch plan cannot be realized for the given dataset."""


class IngestionError(BiaslessNasError):
    """Dataset manifest or tensor file failed validation."""

    def __init__(self, message, row=None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row


class NumericError(BiaslessNasError):
    """NaN/Inf encountered, or training diverged."""


class StateError(BiaslessNasError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class WeightingError(BiaslessNasError):
    """Fair-loss weighting undefined for a group present in the batch."""


class EvaluationError(BiaslessNasError):
    """Evaluation impossible (e.g. empty group in the validation split)."""


class DegenerateMetricError(BiaslessNasError):
    """Fairness metric undefined (zero privileged favorable rate)."""


class BatchError(BiaslessNasError):
    """Episode batch does not match the configured episode count."""


class CheckpointError(BiaslessNasError):
    """Policy checkpoint missing, corrupt, or schema-incompatible."""


class MissingEntryError(BiaslessNasError, LookupError):
    """Surrogate table has no entry for the requested point."""
