"""Exception hierarchy. Each class carries the CLI exit code for its category."""


class EfficientSignError(Exception):
    exit_code = 1


class ConfigurationError(EfficientSignError, ValueError):
    exit_code = 3


class InputError(EfficientSignError, ValueError):
    exit_code = 4


class CheckpointFormatError(EfficientSignError):
    exit_code = 5


class CheckpointCorruptionError(CheckpointFormatError):
    exit_code = 6


class IncompatibleCheckpointError(CheckpointFormatError):
    exit_code = 7


class TrainingError(EfficientSignError, RuntimeError):
    exit_code = 8


class NumericError(EfficientSignError, ArithmeticError):
    exit_code = 9
