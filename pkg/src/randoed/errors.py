"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called outside its declared contract."""


class CapExceededError(ContractError):
    """A dense materialization would exceed the configured entry cap."""


class SolverError(RuntimeError):
    """An iterative solver failed to converge.

    Carries the worst relative residual seen so the caller can report it.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class NumericalError(RuntimeError):
    """A computation produced non-finite or otherwise unusable values."""


class AssumptionError(ValueError):
    """A theoretical precondition (e.g. eigenvalue-gap ratio < 1) fails."""


class DescentError(RuntimeError):
    """The majorize-minimize loop observed an objective increase."""


class ConfigError(ValueError):
    """A configuration file failed validation; names the offending path."""

    def __init__(self, path, message):
        super().__init__(f"{path}: {message}")
        self.path = path
