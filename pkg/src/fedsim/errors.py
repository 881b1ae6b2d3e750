"""Exception hierarchy shared across the package."""


class FedsimError(Exception):
    """Base class for all fedsim errors."""


class ConfigError(FedsimError):
    """Invalid configuration, hyperparameter, or layer specification."""


class ShapeError(FedsimError):
    """Tensor shape mismatch; message names both shapes."""


class ProtocolError(FedsimError):
    """Malformed federation message (missing controls, shape drift, ...)."""


class DataFormatError(FedsimError):
    """Corrupt or inconsistent on-disk dataset file."""
