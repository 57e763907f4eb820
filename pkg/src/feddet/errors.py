"""Exception types shared across the package."""


class FeddetError(Exception):
    """Base class for all package errors."""


class ShapeError(FeddetError, ValueError):
    """Operand shapes violate an operation's contract."""


class ConfigError(FeddetError, ValueError):
    """Invalid configuration value or unknown configuration key."""


class ContractError(FeddetError, ValueError):
    """An operation precondition was violated (non-shape, non-config)."""


class StructureError(FeddetError, KeyError):
    """A parameter tree is structurally incomplete or inconsistent."""


class AggregationError(FeddetError, ValueError):
    """Client parameter trees disagree structurally during aggregation."""


class DataError(FeddetError, ValueError):
    """Malformed dataset/checkpoint file or unusable data on disk."""
