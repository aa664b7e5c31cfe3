"""Exception types shared across the package.

Every module raises subclasses of :class:`CageLabError` so callers (and the
CLI) can separate usage mistakes from runtime failures.
"""


class CageLabError(Exception):
    """Base class for all package errors."""


class DimensionError(CageLabError):
    """Tensor/argument shapes are incompatible."""


class NumericError(CageLabError):
    """An operation produced non-finite values."""


class InputError(CageLabError):
    """An input value violates a precondition (range, finiteness)."""


class ConfigError(CageLabError):
    """A configuration object or manifest is invalid."""


class ContractError(CageLabError):
    """An API contract was violated (wrong call pattern, bad argument)."""


class DegenerateInputError(CageLabError):
    """A mathematically degenerate input (zero norm, all-zero weights)."""


class OptimizationDivergedError(CageLabError):
    """The attack loop produced a non-finite loss."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class CalibrationError(CageLabError):
    """Detector calibration cannot proceed (too few samples)."""


class TrainingError(CageLabError):
    """Pipeline training diverged."""


class SweepError(CageLabError):
    """A sweep cell could not be evaluated (names the cell)."""
