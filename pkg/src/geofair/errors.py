"""Exception hierarchy shared by every geofair module."""


class GeoFairError(Exception):
    """Base class for all errors raised by geofair."""

    exit_code = 1


class ValidationError(GeoFairError, ValueError):
    """Input data or arguments violate a documented invariant."""


class ConfigError(ValidationError):
    """An experiment configuration is invalid."""


class ShapeError(ValidationError):
    """Array dimensions do not chain through a model."""


class ContractError(GeoFairError, RuntimeError):
    """An API was used out of order, e.g. backward with a stale cache."""


class NumericError(GeoFairError, ArithmeticError):
    """A non-finite value appeared during training."""

    exit_code = 3


class CheckpointError(GeoFairError, ValueError):
    """A checkpoint file is malformed or does not match the expected model."""
