"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ParameterError(ValueError):
    """A hyperparameter or argument is outside its allowed range."""


class EvaluationError(RuntimeError):
    """A forward evaluation produced a non-finite or otherwise unusable value."""


class FrozenParameterError(RuntimeError):
    """An optimizer (or stats update) touched a frozen parameter."""


class InsufficientStatsError(RuntimeError):
    """Running statistics were queried before enough samples were recorded."""


class ContractError(RuntimeError):
    """A caller violated a module contract (wrong phase, mixed batch, ...)."""


class ValidationError(ValueError):
    """An input file or spec failed validation; message names the offender."""


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class CheckpointCorruptError(CheckpointError):
    """Checkpoint bytes are truncated or structurally invalid."""
