"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operands have incompatible shapes."""


class ContractError(ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class ParseError(ValueError):
    """Malformed input file."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step, loss):
        super().__init__(f"non-finite loss {loss!r} at step {step}")
        self.step = step
