"""Exception hierarchy shared by every bers module."""


class BersError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class DimensionError(BersError, ValueError):
    """Tensor or array shapes are incompatible."""


class ConfigurationError(BersError, ValueError):
    """A configuration value or the pairing of two objects is invalid."""


class DegenerateBatchError(BersError, ValueError):
    """Batch statistics cannot be computed from a single element per channel."""


class LabelError(BersError, ValueError):
    """A class label is out of range."""


class ContractError(BersError, RuntimeError):
    """An operation was called outside its documented preconditions."""


class FormatError(BersError, ValueError):
    """A file does not carry the expected magic bytes or version."""


class IntegrityError(BersError, ValueError):
    """A file is truncated or fails its checksum."""


class DataError(BersError, ValueError):
    """A dataset or split is empty, malformed or overlapping."""


class SpecError(DataError):
    """A synthetic dataset specification is unsatisfiable."""


class LengthError(BersError, ValueError):
    """A sequence is too short for the requested operation."""


class DivergenceError(BersError, FloatingPointError):
    """Training produced a non-finite loss."""

    exit_code = 3

    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch
        self.value = value
