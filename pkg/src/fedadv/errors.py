"""Exception types raised across the package."""


class FedAdvError(Exception):
    """Base class for all package errors."""


class DimensionError(FedAdvError, ValueError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigError(FedAdvError, ValueError):
    """Invalid configuration or mismatched architectures."""


class DataError(FedAdvError, ValueError):
    """Malformed or inconsistent input data."""


class UsageError(FedAdvError, ValueError):
    """An API was called outside its contract (empty batch, non-scalar loss...)."""


class DivergedError(FedAdvError, RuntimeError):
    """Training produced a non-finite loss or metric."""

    def __init__(self, message, *, round_index=None, client_id=None, seed=None):
        super().__init__(message)
        self.round_index = round_index
        self.client_id = client_id
        self.seed = seed
