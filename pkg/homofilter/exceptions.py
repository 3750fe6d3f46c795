"""Exception hierarchy; every error carries an ErrorDetail and a CLI exit code."""

from typing import Iterable, Optional

from homofilter.models.reports import ErrorDetail


class HomofilterError(Exception):
    """Base class for all homofilter failures."""

    exit_code: int = 3
    default_code: str = "HOMOFILTER_ERROR"

    def __init__(
            self,
            message: str,
            *,
            code: Optional[str] = None,
            location: Optional[str] = None,
            suggestion: Optional[str] = None,
    ):
        super().__init__(message)
        self.detail = ErrorDetail(
            code=code or self.default_code,
            message=message,
            location=location,
            suggestion=suggestion,
        )

    @property
    def message(self) -> str:
        return self.detail.message


# Configuration errors (exit code 2)

class ConfigError(HomofilterError):
    """Invalid configuration, model file or experiment document."""
    exit_code = 2
    default_code = "CONFIG_ERROR"


class ModelValidationError(ConfigError):
    """A model violates a structural assumption (e.g. K not positive definite)."""
    default_code = "MODEL_REJECTED"


class ExpressionSyntaxError(ConfigError):
    """Coefficient expression does not match the grammar."""
    default_code = "EXPRESSION_SYNTAX"

    def __init__(self, message: str, *, text: str, offset: int, expected: Iterable[str] = ()):
        self.text = text
        self.offset = offset
        self.expected = tuple(sorted(set(expected)))
        suggestion = None
        if self.expected:
            suggestion = "expected one of: " + ", ".join(self.expected)
        super().__init__(
            f"{message} at offset {offset} in {text!r}",
            location=f"offset {offset}",
            suggestion=suggestion,
        )


class UnknownIdentifierError(ConfigError):
    """Expression references a variable or function that is not defined."""
    default_code = "EXPRESSION_UNKNOWN_IDENTIFIER"

    def __init__(self, name: str, *, text: str, offset: int):
        self.name = name
        self.offset = offset
        super().__init__(
            f"unknown identifier {name!r} at offset {offset} in {text!r}",
            location=f"offset {offset}",
        )


class ArityError(ConfigError):
    """A function was called with the wrong number of arguments."""
    default_code = "EXPRESSION_ARITY"

    def __init__(self, name: str, got: int, *, text: str, offset: int):
        self.name = name
        self.got = got
        self.offset = offset
        super().__init__(
            f"function {name!r} takes 1 argument, got {got} (offset {offset} in {text!r})",
            location=f"offset {offset}",
        )


class OracleError(ConfigError):
    """The Kalman-Bucy oracle was asked to handle a non linear-Gaussian model."""
    default_code = "ORACLE_REJECTED"


# Numerical aborts (exit code 3)

class NumericalAbort(HomofilterError):
    """A computation produced an unusable numerical state."""
    exit_code = 3
    default_code = "NUMERICAL_ABORT"


class ExpressionDomainError(NumericalAbort):
    """Expression evaluation left the real domain (sqrt of negative, 1/0, overflow)."""
    default_code = "EXPRESSION_DOMAIN"


class SimulationError(NumericalAbort):
    """Non-finite state encountered while integrating an SDE."""
    default_code = "SIMULATION_BLOWUP"

    def __init__(self, message: str, *, step: int, suggestion: Optional[str] = None):
        self.step = step
        super().__init__(message, location=f"step {step}", suggestion=suggestion)


class HomogenizationError(NumericalAbort):
    default_code = "HOMOGENIZATION_FAILED"


class FilterError(NumericalAbort):
    """Particle filter failure (weight collapse or NaN propagation)."""
    default_code = "FILTER_FAILED"

    def __init__(self, message: str, *, step: Optional[int] = None, particle: Optional[int] = None):
        self.step = step
        self.particle = particle
        parts = []
        if step is not None:
            parts.append(f"step {step}")
        if particle is not None:
            parts.append(f"particle {particle}")
        super().__init__(message, location=", ".join(parts) or None)


class DualStabilityError(NumericalAbort):
    """Explicit backward sweep would be unstable for the requested step."""
    default_code = "DUAL_UNSTABLE"

    def __init__(self, message: str, *, suggested_dt: float):
        self.suggested_dt = suggested_dt
        super().__init__(message, suggestion=f"use a time step <= {suggested_dt:.6g}")


class DualCostError(NumericalAbort):
    default_code = "DUAL_COST_BUDGET"


class CorrectorError(NumericalAbort):
    default_code = "CORRECTOR_REFUSED"


class FitError(NumericalAbort):
    default_code = "FIT_REFUSED"


# Acceptance gate (exit code 4)

class AcceptanceGateFailure(HomofilterError):
    """The study ran but did not meet its acceptance criteria."""
    exit_code = 4
    default_code = "ACCEPTANCE_FAILED"
