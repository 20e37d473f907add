"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: config 2, data 3, adapter 4, numeric 5.
"""


class AgeAuditError(Exception):
    """Base class for all errors raised by this package."""


class DecodeError(AgeAuditError):
    """An input image file could not be decoded."""


class FormatError(AgeAuditError):
    """A binary artifact (raster, checkpoint, filter bank) is malformed."""


class DataError(AgeAuditError):
    """Invalid data passed to an operation (shapes, labels, empty inputs)."""


class ConfigError(AgeAuditError):
    """An experiment configuration is missing, inconsistent, or invalid."""


class AdapterError(AgeAuditError):
    """An external classifier subprocess misbehaved.

    `stderr` carries the captured subprocess stderr, if any.
    """

    def __init__(self, message, stderr=""):
        super().__init__(message)
        self.stderr = stderr


class NumericError(AgeAuditError):
    """A numeric computation failed (non-finite values, degenerate input)."""


class TrainingDivergedError(NumericError):
    """Training loss became non-finite."""
