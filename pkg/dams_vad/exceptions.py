from __future__ import annotations


class DamsError(Exception):
    """Base error. ``category`` and ``exit_code`` surface through the CLI."""

    category = "error"
    exit_code = 1


class ConfigError(DamsError):
    category = "config"
    exit_code = 3


class MissingPathError(DamsError):
    category = "missing-path"
    exit_code = 4


class FeatureFormatError(DamsError):
    category = "format"
    exit_code = 5
    code = "format"


class BadMagicError(FeatureFormatError):
    code = "bad-magic"


class BadVersionError(FeatureFormatError):
    code = "bad-version"


class CrcMismatchError(FeatureFormatError):
    code = "crc-mismatch"


class TruncatedFileError(FeatureFormatError):
    code = "truncated"


class DatasetError(DamsError):
    category = "dataset"
    exit_code = 6


class TrainingAbortedError(DamsError):
    category = "training-aborted"
    exit_code = 7

    def __init__(self, message: str, iteration: int | None = None) -> None:
        super().__init__(message)
        self.iteration = iteration


class GradCheckError(DamsError):
    category = "gradcheck"
    exit_code = 8


class UndefinedMetricError(DamsError):
    category = "undefined-metric"
    exit_code = 9


class NumericError(DamsError):
    category = "numeric"
    exit_code = 10


class DimensionError(NumericError):
    category = "dimension"


class DegenerateBatchError(NumericError):
    category = "degenerate-batch"


class OutputExistsError(DamsError):
    category = "output-exists"
    exit_code = 11
