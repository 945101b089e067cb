"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss or otherwise failed numerically."""


class CheckpointError(RuntimeError):
    """A checkpoint file is malformed, truncated, or fails its integrity hash."""


class CheckpointMismatchError(CheckpointError):
    """A calibrator checkpoint was loaded against a model with a different digest."""
