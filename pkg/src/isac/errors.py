"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration: shapes, ids, ranges."""


class NumericalError(ArithmeticError):
    """Non-finite values produced during a run."""

    def __init__(self, message: str, timestep: int | None = None):
        if timestep is not None:
            message = f"t={timestep}: {message}"
        super().__init__(message)
        self.timestep = timestep


class UnsupportedOperation(RuntimeError):
    pass
