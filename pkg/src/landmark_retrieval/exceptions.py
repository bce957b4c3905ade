"""Exception hierarchy shared by every module.

CLI exit codes hang off the base classes: config problems exit 2,
data-format problems 3, training-state problems 4, evaluation problems 5.
"""


class LandmarkError(Exception):
    exit_code = 1


class ConfigError(LandmarkError, ValueError):
    exit_code = 2


class DataFormatError(LandmarkError, ValueError):
    exit_code = 3


class FormatError(DataFormatError):
    """Malformed or unwritable EMB1 / HEAD / PPM payload."""


class ZeroVectorError(DataFormatError):
    pass


class DimMismatchError(DataFormatError):
    pass


class DuplicateIdError(DataFormatError):
    pass


class InvalidPError(ConfigError):
    pass


class InvalidFractionError(ConfigError):
    pass


class TrainingStateError(LandmarkError):
    exit_code = 4


class MissingCheckpointError(TrainingStateError):
    pass


class BatchTooSmallError(TrainingStateError, ValueError):
    pass


class InvalidTargetError(LandmarkError, ValueError):
    pass


class EvaluationError(LandmarkError):
    exit_code = 5


class IdMisalignmentError(EvaluationError, ValueError):
    pass


class IoError(DataFormatError):
    """A file could not be read or written."""
