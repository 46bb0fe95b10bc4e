"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericError -> 4. Gradcheck failures use exit 5 without
a dedicated exception.
"""


class LmrCbtError(Exception):
    """Base class for all package errors."""


class DimensionError(LmrCbtError, ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(LmrCbtError, ValueError):
    """An API precondition was violated (wrong rank, task mismatch, ...)."""


class ConfigError(LmrCbtError, ValueError):
    """Invalid configuration value or combination."""


class DataError(LmrCbtError, ValueError):
    """Invalid data content (empty modality, bad label, ...)."""


class EmptySequenceError(DataError):
    """A sequence-valued input has zero time steps."""


class CapacityError(DataError):
    """A sequence exceeds the configured positional capacity."""


class ParseError(DataError):
    """A record file is malformed at a specific record."""

    def __init__(self, message: str, record_index: int | None = None):
        super().__init__(message)
        self.record_index = record_index


class SchemaError(DataError):
    """File header / checkpoint metadata does not match expectations."""


class NumericError(LmrCbtError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class TrainAbortError(NumericError):
    """Training hit a non-finite loss; carries the failing coordinates."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
