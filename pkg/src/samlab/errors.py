"""Exception types shared across samlab."""


class ContractError(ValueError):
    """A caller violated an operation's precondition (shape, index, sign)."""


class ConfigError(ValueError):
    """An experiment or optimizer configuration is invalid."""


class CapabilityError(RuntimeError):
    """The requested evaluation mode is not available for this problem size."""


class NondifferentiablePointError(ArithmeticError):
    """A drift term was requested where its regularizer has no gradient."""
