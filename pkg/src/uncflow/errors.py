"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (bad shape, bad argument)."""


class FormatError(ValueError):
    """A serialized file could not be decoded."""


class DegenerateMaskError(ValueError):
    """A masked reduction was asked to average over zero pixels."""


class TrainingFault(RuntimeError):
    """Non-finite values appeared during a forward/backward pass or an optimizer step."""

    def __init__(self, message, iteration=None, step=None):
        super().__init__(message)
        self.iteration = iteration
        self.step = step
