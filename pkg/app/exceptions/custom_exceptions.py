"""Custom exceptions for the application."""

from typing import Any, Optional, Sequence


class BaseCustomException(Exception):
    """Base exception class for custom exceptions."""

    def __init__(self, message: str, error_code: str = None):
        """Initialize base exception."""
        super().__init__(message)
        self.message = message
        self.error_code = error_code


class ExpressionSyntaxError(BaseCustomException):
    """Exception raised when an expression string does not follow the grammar."""

    def __init__(self, message: str, offset: int):
        """Initialize expression syntax error."""
        super().__init__(f"{message} (at byte {offset})", "EXPRESSION_SYNTAX_ERROR")
        self.offset = offset


class UnknownIdentifierError(BaseCustomException):
    """Exception raised when an expression uses a name that is neither variable nor parameter."""

    def __init__(self, name: str, offset: int):
        """Initialize unknown identifier error."""
        super().__init__(f"Unknown identifier '{name}' (at byte {offset})", "UNKNOWN_IDENTIFIER")
        self.name = name
        self.offset = offset


class UnboundVariableError(BaseCustomException):
    """Exception raised when evaluating an expression with a free variable left unbound."""

    def __init__(self, name: str):
        """Initialize unbound variable error."""
        super().__init__(f"Variable '{name}' is not bound", "UNBOUND_VARIABLE")
        self.name = name


class EvaluationError(BaseCustomException):
    """Exception raised when an expression cannot be evaluated (division by zero)."""

    def __init__(self, message: str):
        """Initialize evaluation error."""
        super().__init__(message, "EVALUATION_ERROR")


class ModelFileError(BaseCustomException):
    """Exception raised when a model file cannot be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        """Initialize model file error."""
        text = f"{message} (line {line})" if line is not None else message
        super().__init__(text, "MODEL_FILE_ERROR")
        self.line = line


class HypothesisError(BaseCustomException):
    """Exception raised when a model violates one of the standing hypotheses."""

    def __init__(
        self,
        hypothesis: str,
        message: str,
        witness: Optional[Sequence[float]] = None,
        value: Optional[float] = None,
    ):
        """Initialize hypothesis error."""
        super().__init__(f"{hypothesis}: {message}", "HYPOTHESIS_VIOLATION")
        self.hypothesis = hypothesis
        self.witness = None if witness is None else [float(w) for w in witness]
        self.value = value


class ConvergenceError(BaseCustomException):
    """Exception raised when an iterative solver or a quadrature does not converge."""

    def __init__(self, message: str):
        """Initialize convergence error."""
        super().__init__(message, "CONVERGENCE_ERROR")


class TangencyError(BaseCustomException):
    """Exception raised when a projection direction is tangent to a resonance."""

    def __init__(self, message: str):
        """Initialize tangency error."""
        super().__init__(message, "TANGENCY_ERROR")


class HomoclinicError(BaseCustomException):
    """Exception raised when a homoclinic orbit cannot be constructed."""

    def __init__(self, message: str):
        """Initialize homoclinic error."""
        super().__init__(message, "HOMOCLINIC_ERROR")


class RegionError(BaseCustomException):
    """Exception raised when a point leaves the region where a construction is valid."""

    def __init__(self, message: str, witness: Any = None):
        """Initialize region error."""
        super().__init__(message, "REGION_ERROR")
        self.witness = witness


class ClearanceError(BaseCustomException):
    """Exception raised when a path comes too close to the removed codimension-two set."""

    def __init__(self, message: str, witness: Sequence[float], sample: Optional[Sequence[float]] = None):
        """Initialize clearance error."""
        super().__init__(message, "CLEARANCE_ERROR")
        self.witness = [float(w) for w in witness]
        self.sample = None if sample is None else [float(s) for s in sample]


class NoSolutionError(BaseCustomException):
    """Exception raised when the intersection equations have no solution in range."""

    def __init__(self, message: str):
        """Initialize no solution error."""
        super().__init__(message, "NO_SOLUTION")


class ChainError(BaseCustomException):
    """Exception raised when a transition chain cannot be continued."""

    def __init__(self, message: str, segment: Optional[int] = None):
        """Initialize chain error."""
        super().__init__(message, "CHAIN_ERROR")
        self.segment = segment


class SchemeError(BaseCustomException):
    """Exception raised when an integration scheme does not apply to a model."""

    def __init__(self, message: str):
        """Initialize scheme error."""
        super().__init__(message, "SCHEME_ERROR")


class ExcursionError(BaseCustomException):
    """Exception raised when a homoclinic excursion does not come back near the invariant manifold."""

    def __init__(self, message: str):
        """Initialize excursion error."""
        super().__init__(message, "EXCURSION_ERROR")


class LinkMismatchError(BaseCustomException):
    """Exception raised when a measured jump disagrees with the predicted chain link."""

    def __init__(self, message: str, link: int):
        """Initialize link mismatch error."""
        super().__init__(message, "LINK_MISMATCH")
        self.link = link


# Input that is well formed but violates the model contract.
VALIDATION_ERRORS = (
    ModelFileError,
    HypothesisError,
    ExpressionSyntaxError,
    UnknownIdentifierError,
    UnboundVariableError,
    SchemeError,
)

NUMERICAL_ERRORS = (
    ConvergenceError,
    NoSolutionError,
    ChainError,
    TangencyError,
    RegionError,
    HomoclinicError,
    ExcursionError,
    LinkMismatchError,
    EvaluationError,
)
