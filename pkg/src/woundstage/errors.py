"""Exception hierarchy; the CLI maps each family to an exit status."""


class WoundStageError(Exception):
    exit_code = 1


class UsageError(WoundStageError):
    exit_code = 1


class DataError(WoundStageError):
    exit_code = 2


class NumericError(WoundStageError, ArithmeticError):
    exit_code = 3


class DimensionError(WoundStageError, ValueError):
    exit_code = 1


class CheckpointError(DataError):
    pass


class CorruptHeaderError(CheckpointError):
    pass


class PayloadLengthError(CheckpointError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


class ManifestError(DataError):
    pass


class DegenerateInputError(DataError, ValueError):
    pass
