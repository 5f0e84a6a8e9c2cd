"""Exception hierarchy shared across the package."""


class DAMoEError(Exception):
    """Base class for all package errors."""


class DimensionError(DAMoEError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(DAMoEError, ValueError):
    """A caller violated an operation's precondition."""


class ConfigError(DAMoEError, ValueError):
    """An invalid hyperparameter or configuration value."""


class CheckpointError(DAMoEError):
    """A checkpoint file is corrupt, truncated or incompatible."""


class IngestionError(DAMoEError):
    """Input data could not be read or parsed."""


class ComparisonError(DAMoEError):
    """Metrics files cannot be compared side by side."""


class NumericalAbort(DAMoEError):
    """Training produced a non-finite loss and was stopped."""

    def __init__(self, message, step=None, dump_path=None):
        super().__init__(message)
        self.step = step
        self.dump_path = dump_path
