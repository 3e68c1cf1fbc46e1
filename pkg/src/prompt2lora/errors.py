"""Exception hierarchy shared by every stage of the pipeline."""


class Prompt2LoraError(Exception):
    """Base class; ``kind`` is the machine-readable category used by the CLI."""

    kind = "error"


class ConfigurationError(Prompt2LoraError):
    kind = "configuration"


class DomainError(Prompt2LoraError, ValueError):
    kind = "domain"


class StructuralError(Prompt2LoraError, ValueError):
    kind = "structural"


class TrainingError(Prompt2LoraError, RuntimeError):
    """Raised when an optimisation run produces a non-finite loss."""

    kind = "training"

    def __init__(self, message, step=None, context=None):
        super().__init__(message)
        self.step = step
        self.context = context or {}
