"""Exception taxonomy shared by every module in the package."""


class PromptMimError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(PromptMimError):
    """Shapes or axes of the operands do not fit the operation."""


class InputError(PromptMimError):
    """An argument is outside the operation's documented domain."""


class DegenerateInputError(PromptMimError):
    """Input is structurally valid but numerically degenerate (e.g. zero norm)."""


class ContractError(PromptMimError):
    """An internal usage contract was violated (e.g. backward on a non-scalar)."""


class NonFiniteError(PromptMimError):
    """A computation produced NaN or Inf; tensors must stay finite."""


class TrainingError(PromptMimError):
    """Training diverged or was otherwise unable to continue."""

    def __init__(self, message: str, step: int | None = None):
        if step is not None:
            message = f"{message} (step {step})"
        super().__init__(message)
        self.step = step


class ConfigError(PromptMimError):
    """A configuration file or CLI override failed validation."""
