"""Error taxonomy shared by every module.

Data-shaped errors also subclass ValueError so callers that only know about
ValueError keep working.
"""


class ShiftCPError(Exception):
    """Base class for all errors raised by shiftcp"""


class DataError(ShiftCPError, ValueError):
    """Problems with input tables or files"""


class MissingFile(DataError, FileNotFoundError):
    pass


class MissingColumn(DataError):
    pass


class EmptyTable(DataError):
    pass


class UnparseableTimestamp(DataError):
    pass


class ConfigError(ShiftCPError, ValueError):
    """Invalid command options or run configuration"""


class ScenarioError(ShiftCPError, ValueError):
    """Invalid scenario or split parameters"""


class ModelError(ShiftCPError, ValueError):
    pass


class CalibrationError(ShiftCPError, ValueError):
    pass


class DiagnosticsError(ShiftCPError, ValueError):
    pass


class ImportanceError(ShiftCPError, ValueError):
    pass


class StatisticsError(ShiftCPError, ValueError):
    pass


class ConstantInput(StatisticsError):
    pass


class AllZeroDifferences(StatisticsError):
    pass


class ResampleExhausted(StatisticsError):
    pass


class HarnessError(ShiftCPError, ValueError):
    pass


class StageError(ShiftCPError):
    """Failure inside a named pipeline stage; the original error is __cause__"""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage} failed: {message}")
        self.stage = stage
