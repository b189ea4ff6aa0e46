"""Exception types raised across the package."""


class MetaLoraError(Exception):
    """Base class for all package errors."""


class ShapeError(MetaLoraError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MetaLoraError, ValueError):
    """A precondition on an argument was violated."""


class BindingError(MetaLoraError, KeyError):
    """An adapter or weight refers to a layer the model does not have."""

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the message readable.
        return str(self.args[0]) if self.args else ""


class NonFiniteError(MetaLoraError, FloatingPointError):
    """A primitive produced NaN or infinity while debug checks were on."""


class DivergenceError(MetaLoraError, FloatingPointError):
    """Training produced a non-finite loss."""


class CapacityError(MetaLoraError, ValueError):
    """A generator cannot produce enough distinct examples."""


class ConfigError(MetaLoraError, ValueError):
    """A run configuration failed validation."""


class ComparisonError(MetaLoraError, ValueError):
    """Runs cannot be tabulated side by side."""
