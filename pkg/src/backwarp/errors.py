"""Exception types shared across the package."""


class BackwarpError(Exception):
    """Base class for all package errors."""


class DimensionError(BackwarpError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(BackwarpError, ValueError):
    """A configuration value is invalid or inconsistent."""


class ContractError(BackwarpError, RuntimeError):
    """A caller violated an operation's precondition."""


class RangeError(BackwarpError, ValueError):
    """An index or window falls outside its valid range."""


class IngestError(BackwarpError, ValueError):
    """A frame directory cannot be ingested as a dataset."""


class CheckpointError(BackwarpError, RuntimeError):
    """A checkpoint file is malformed or incompatible with the model."""


class NumericError(BackwarpError, RuntimeError):
    """A numeric failure (NaN/Inf) was detected during training."""
