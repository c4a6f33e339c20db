"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class NumericError(ArithmeticError):
    """A non-finite value reached an operation that requires finite input."""


class StructuralError(RuntimeError):
    """A computation record is not a valid topologically ordered graph."""


class ConfigurationError(ValueError):
    """Invalid static configuration (head counts, ranks, k, ...)."""


class RegistrationError(ValueError):
    """Concept registration conflict."""


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite step for diagnosis."""

    def __init__(self, message, last_finite_step=None, breakdown=None):
        super().__init__(message)
        self.last_finite_step = last_finite_step
        self.breakdown = breakdown
