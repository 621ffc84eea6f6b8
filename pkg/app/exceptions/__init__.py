"""Exceptions module."""

from .custom_exceptions import (
    BaseCustomException,
    ExpressionSyntaxError,
    UnknownIdentifierError,
    UnboundVariableError,
    EvaluationError,
    ModelFileError,
    HypothesisError,
    ConvergenceError,
    TangencyError,
    HomoclinicError,
    RegionError,
    ClearanceError,
    NoSolutionError,
    ChainError,
    SchemeError,
    ExcursionError,
    LinkMismatchError,
    NUMERICAL_ERRORS,
    VALIDATION_ERRORS,
)

__all__ = [
    "BaseCustomException",
    "ExpressionSyntaxError",
    "UnknownIdentifierError",
    "UnboundVariableError",
    "EvaluationError",
    "ModelFileError",
    "HypothesisError",
    "ConvergenceError",
    "TangencyError",
    "HomoclinicError",
    "RegionError",
    "ClearanceError",
    "NoSolutionError",
    "ChainError",
    "SchemeError",
    "ExcursionError",
    "LinkMismatchError",
    "NUMERICAL_ERRORS",
    "VALIDATION_ERRORS",
]
