"""
Error types
-----------

Every failure the engine raises on purpose derives from `AutoGanError`.
`exit_code` is what the CLI returns when the error escapes a command:
  1 - configuration error
  2 - data error
  3 - numerical abort
"""


class AutoGanError(Exception):
    exit_code = 3


# --- configuration (exit code 1) ---

class ConfigError(AutoGanError, ValueError):
    exit_code = 1

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class StageError(AutoGanError):
    """Stage or resolution does not match what the network was built for."""
    exit_code = 1


class GenotypeError(AutoGanError, ValueError):
    exit_code = 1

    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid genotype: " + "; ".join(self.violations))


class DecodeError(AutoGanError, ValueError):
    exit_code = 1

    def __init__(self, message: str, slot: str | None = None, value: int | None = None):
        self.slot = slot
        self.value = value
        super().__init__(message)


class ControllerStateError(AutoGanError):
    exit_code = 1


# --- data (exit code 2) ---

class DataFormatError(AutoGanError):
    exit_code = 2

    def __init__(self, message: str, byte_position: int | None = None):
        self.byte_position = byte_position
        if byte_position is not None:
            message = f"{message} (at byte {byte_position})"
        super().__init__(message)


class CorruptCheckpointError(AutoGanError):
    exit_code = 2


class ImageRangeError(AutoGanError, ValueError):
    exit_code = 2


class SampleCountError(AutoGanError, ValueError):
    exit_code = 2


# --- numerical (exit code 3) ---

class DimensionError(AutoGanError, ValueError):
    def __init__(self, message: str, axes: tuple | None = None):
        self.axes = axes
        super().__init__(message)


class DegenerateBatchError(AutoGanError, ValueError):
    pass


class OptimizerError(AutoGanError, FloatingPointError):
    def __init__(self, parameter_name: str):
        self.parameter_name = parameter_name
        super().__init__(f"non-finite gradient for parameter '{parameter_name}'")


class TrainingStepError(AutoGanError, FloatingPointError):
    pass


class RewardError(AutoGanError, ValueError):
    pass


class PSDViolationError(AutoGanError, ValueError):
    pass


class UndefinedCorrelationError(AutoGanError, ValueError):
    pass


class CalibrationError(AutoGanError):
    pass
