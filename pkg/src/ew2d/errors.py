"""Exception types shared across the package."""


class EW2DError(Exception):
    """Base class for all package errors."""


class DomainError(EW2DError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ConfigurationError(EW2DError, ValueError):
    """A configuration violates a precondition (grid resolution, CFL, ...)."""


class ValidationError(EW2DError, ValueError):
    """An object fails its structural invariants (e.g. unit mass)."""


class DivergentIntegralError(EW2DError, ArithmeticError):
    """The requested integral is not finite for the given input."""


class BlowUpError(EW2DError, ArithmeticError):
    """The field became non-finite during time stepping."""

    def __init__(self, t, message=None):
        self.t = float(t)
        super().__init__(message or f"non-finite field at t={self.t:.6g}")


class SchemeFailure(EW2DError, ArithmeticError):
    """A deterministic scheme produced an inadmissible state."""


class FixedPointFailure(EW2DError, ArithmeticError):
    """Picard iteration did not converge."""

    def __init__(self, residuals, message=None):
        self.residuals = list(residuals)
        last = self.residuals[-1] if self.residuals else float("nan")
        super().__init__(
            message or f"no convergence after {len(self.residuals)} iterations "
            f"(last residual {last:.3e})"
        )
