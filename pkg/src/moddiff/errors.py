class ModDiffError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(ModDiffError, ValueError):
    pass


class ContractError(ModDiffError, ValueError):
    """A documented precondition of an operation was violated."""


class LayoutError(ModDiffError, ValueError):
    pass


class CacheError(ModDiffError, ValueError):
    """KV cache does not belong to the layout it is being used with."""


class NumericError(ModDiffError, ArithmeticError):
    pass


class TrainingDiverged(ModDiffError, RuntimeError):
    def __init__(self, step, checkpoint_path=None):
        self.step = step
        self.checkpoint_path = checkpoint_path
        msg = f"loss became non-finite at step {step}"
        if checkpoint_path is not None:
            msg += f"; last good checkpoint at {checkpoint_path}"
        super().__init__(msg)
