"""Exception types shared across the toolkit."""


class StriderError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(StriderError):
    """Operands have incompatible shapes."""


class ArchError(StriderError):
    """Architecture string or layer-kind list is invalid."""


class MaskError(StriderError):
    """Pruning mask violates a structural constraint."""


class CheckpointError(StriderError):
    """Checkpoint file is malformed or truncated."""


class DatasetError(StriderError):
    """Dataset file is missing, malformed, or inconsistent."""


class SearchError(StriderError):
    """Mask search cannot proceed (infeasible target or degenerate swarm)."""


class TrainingError(StriderError):
    """Training aborted (non-finite loss or invalid configuration)."""


class ConfigError(StriderError):
    """Pipeline configuration is invalid."""
