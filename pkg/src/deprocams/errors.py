"""Exception hierarchy shared by every module.

Each class carries an ``exit_code`` and a short ``category`` used by the CLI to
report failures as one machine-parsable line.
"""


class DeProCamsError(Exception):
    category = "error"
    exit_code = 1


class ShapeError(DeProCamsError, ValueError):
    category = "shape"
    exit_code = 7


class NumericError(DeProCamsError, ArithmeticError):
    category = "numeric"
    exit_code = 9


class DegenerateGeometryError(DeProCamsError, ValueError):
    category = "degenerate-geometry"
    exit_code = 10


class BehindProjectorError(DegenerateGeometryError):
    category = "behind-projector"


class ConfigError(DeProCamsError, ValueError):
    category = "config"
    exit_code = 8


class CalibrationError(DeProCamsError, ValueError):
    category = "calibration"
    exit_code = 4


class CheckpointVersionError(DeProCamsError):
    category = "version"
    exit_code = 5


class TrainingDiverged(DeProCamsError):
    """Raised when a loss turns NaN/Inf (training) or keeps growing (compensation)."""

    category = "nan-abort"
    exit_code = 6


class TaskError(DeProCamsError):
    category = "task"
    exit_code = 11


class MissingFileError(DeProCamsError, FileNotFoundError):
    category = "missing-file"
    exit_code = 3
