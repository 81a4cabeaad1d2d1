class DFlatError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DFlatError):
    pass


class ConfigError(DFlatError):
    pass


class StateError(DFlatError):
    pass


class ResourceError(DFlatError):
    pass


class DivergenceError(DFlatError):
    pass


class CheckpointError(DFlatError):
    """Missing or unreadable checkpoint, tensor dump or config file."""
