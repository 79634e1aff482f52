"""Exception hierarchy shared across the package."""


class CrossviewError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CrossviewError):
    """Operands have incompatible or unsupported shapes."""


class ContractError(CrossviewError):
    """A documented precondition was violated by the caller."""


class NumericError(CrossviewError):
    """A computation produced or received non-finite values."""


class ManifestError(CrossviewError):
    """A dataset manifest is malformed or references missing files."""


class CheckpointError(CrossviewError):
    """A checkpoint file is malformed or has an unsupported version."""


class TrainingDiverged(CrossviewError):
    """Training hit a non-finite loss; carries the failing step index."""

    def __init__(self, step: int, checkpoint_path=None):
        self.step = step
        self.checkpoint_path = checkpoint_path
        msg = f"non-finite loss at step {step}"
        if checkpoint_path is not None:
            msg += f" (last good state saved to {checkpoint_path})"
        super().__init__(msg)
