"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """A caller broke an operation's precondition (shape, length, phase)."""


class NumericError(ArithmeticError):
    """A forward or backward pass produced non-finite values."""


class BurnInError(RuntimeError):
    """Burn-in did not reach a stationary state within the season budget."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ConfigError(ValueError):
    """An experiment spec or config failed validation."""
