"""Exception types shared across the package."""


class GnesError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(GnesError):
    """A vector or matrix does not match the declared block structure."""

    def __init__(self, message: str, block: str | None = None):
        self.block = block
        if block is not None:
            message = f"{message} (block: {block})"
        super().__init__(message)


class ConfigurationError(GnesError):
    """A parameter or configuration document violates a validity condition."""

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        super().__init__(message)


class NumericError(GnesError):
    """A numerical evaluation produced a non-finite value."""

    def __init__(self, message: str, agent: int | None = None):
        self.agent = agent
        if agent is not None:
            message = f"{message} (agent {agent})"
        super().__init__(message)


class ToleranceError(GnesError):
    """An iterative subroutine stopped before reaching its target accuracy."""

    def __init__(self, message: str, achieved: float | None = None):
        self.achieved = achieved
        super().__init__(message)
