"""Exception types shared across the toolkit.

The CLI maps :class:`ContractError` to exit code 1 and
:class:`ConfigurationError` to exit code 2.
"""


class ContractError(ValueError):
    """A caller violated an operation precondition."""


class DimensionError(ContractError):
    """Operand shapes are incompatible for the requested op."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


class ConfigurationError(ValueError):
    """An invalid model, objective or run configuration."""


class DivergenceError(RuntimeError):
    """An optimisation run blew up."""
