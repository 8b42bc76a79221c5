"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 1,
DivergenceError / NumericalError -> 2, gradient-check failure -> 3.
"""


class ShapeError(ValueError):
    """Operands with incompatible shapes; message carries both shapes."""


class ConfigError(ValueError):
    """Invalid configuration key, value, or combination."""


class DataError(ValueError):
    """Malformed dataset manifest or payload."""


class NumericalError(ArithmeticError):
    """Non-finite value encountered where a finite one is required."""


class DivergenceError(NumericalError):
    """Training loss became non-finite; carries the step and loss terms."""

    def __init__(self, step, terms):
        self.step = step
        self.terms = dict(terms)
        parts = ", ".join(f"{k}={v}" for k, v in self.terms.items())
        super().__init__(f"non-finite loss at step {step} ({parts})")
