"""Exception types shared across the package."""


class SfpnetError(Exception):
    """Base class for all package errors."""


class ShapeError(SfpnetError):
    """Operand shapes do not agree; message names both operands."""


class VocabError(SfpnetError):
    """A raw id falls outside its field's vocabulary."""


class ConfigError(SfpnetError):
    """Invalid or inconsistent configuration, detected before any work runs."""


class DataError(SfpnetError):
    """Malformed dataset file; message carries file, line and column."""


class MetricError(SfpnetError):
    """Metric undefined for the given input (e.g. single-class AUC)."""


class CheckpointError(SfpnetError):
    """Unreadable or incompatible checkpoint file."""


class TrainingDiverged(SfpnetError):
    """Loss became non-finite during training; message carries diagnostics."""
