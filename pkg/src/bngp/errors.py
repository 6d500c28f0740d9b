"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its documented domain."""


class ParseError(ValueError):
    """A dataset or config file does not match its schema."""


class DomainError(ValueError):
    """The requested quantity is mathematically undefined for the input."""


class CapabilityError(RuntimeError):
    """An exact computation would exceed the enumeration guards."""


class NumericError(FloatingPointError):
    """A non-finite value reached a place that requires finite numbers."""


class StateError(RuntimeError):
    """An object was used out of order (e.g. backward before forward)."""


class TrainingError(RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class MetricError(ValueError):
    """A metric cannot be computed from the given labels."""


class ContractError(AssertionError):
    """A scoring function or verification contract was violated."""
