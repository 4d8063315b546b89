"""Exception hierarchy shared across the package."""


class ConvAEError(Exception):
    """Base class for all package errors."""


class DimensionError(ConvAEError, ValueError):
    """Tensor shapes do not conform to an operation's contract."""


class NumericError(ConvAEError, FloatingPointError):
    """A NaN or infinite value reached an operation boundary."""


class ContractError(ConvAEError, ValueError):
    """A precondition of an operation was violated."""


class IngestionError(ConvAEError, ValueError):
    """A cycle file could not be parsed."""


class ConfigurationError(ConvAEError, ValueError):
    """Invalid configuration values."""


class StateError(ConvAEError, RuntimeError):
    """Operation applied to an object in the wrong state."""


class TooShortError(ConvAEError, ValueError):
    """A cycle is shorter than the requested window."""


class TransferError(ConvAEError, ValueError):
    """Weights cannot be transferred between the given networks."""


class CheckpointError(ConvAEError):
    """Base class for checkpoint load failures."""


class VersionMismatchError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass
