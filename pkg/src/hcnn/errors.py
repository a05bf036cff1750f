"""Exception hierarchy. Each class maps to one CLI exit code."""


class HCNNError(Exception):
    exit_code = 1


class ShapeError(HCNNError, ValueError):
    exit_code = 2


class ConfigError(HCNNError, ValueError):
    exit_code = 2


class DataError(HCNNError):
    exit_code = 3


class NumericError(HCNNError, FloatingPointError):
    exit_code = 4


class MissingFileError(DataError, FileNotFoundError):
    """An input file (config, checkpoint or dataset) does not exist."""


class CheckpointMismatchError(ConfigError):
    exit_code = 6
