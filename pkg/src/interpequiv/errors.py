"""Exception hierarchy shared by every module.

Each error carries a short machine-readable ``code`` used by the CLI to pick
an exit status.
"""

from __future__ import annotations


class InterpEquivError(Exception):
    code = "error"


class ValidationError(InterpEquivError):
    code = "validation"


class AssumptionViolated(InterpEquivError):
    code = "assumption"


# causal-core
class CycleDetected(ValidationError):
    pass


class DuplicateTransition(ValidationError):
    pass


class MissingTransition(ValidationError):
    pass


class UnknownParentId(ValidationError):
    pass


class UnknownTarget(ValidationError):
    pass


class OrderViolation(ValidationError):
    pass


class EvaluatorFailure(InterpEquivError):
    def __init__(self, variable_id: str, cause: BaseException | str):
        self.variable_id = variable_id
        self.cause = cause
        super().__init__(f"evaluator for {variable_id!r} failed: {cause}")


class UnmappedHighVariable(ValidationError):
    pass


class InterventionOutsideDomain(ValidationError):
    pass


class DomainMismatch(ValidationError):
    pass


class SerializationError(ValidationError):
    pass


# rasp-mini
class RaspSyntaxError(ValidationError):
    def __init__(self, message: str, line: int = 0, column: int = 0):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


class UnknownPrimitive(RaspSyntaxError):
    pass


class TypeMismatch(RaspSyntaxError):
    pass


class RaspRuntimeError(ValidationError):
    pass


class AlphabetViolation(ValidationError):
    pass


class CapacityExceeded(ValidationError):
    pass


class UnsupportedOp(ValidationError):
    pass


# impl-gen
class EmptyTask(ValidationError):
    pass


class TargetIsOutput(ValidationError):
    pass


class TargetIsInput(ValidationError):
    pass


class BudgetExhausted(InterpEquivError):
    pass


class NoUnimportantComponents(InterpEquivError):
    pass


# repr-sim
class ShapeMismatch(ValidationError):
    pass


class NonChainPooling(ValidationError):
    pass


class UnknownVariable(ValidationError):
    pass


# congruity
class InsufficientRounds(ValidationError):
    pass


class GenerationFailure(InterpEquivError):
    pass


# equiv-metrics
class EmptySet(ValidationError):
    pass


class InsufficientSamples(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class MissingTerm(ValidationError):
    pass


# cli
class MissingArtifact(ValidationError):
    pass


class DegenerateVariantsWarning(UserWarning):
    """Variants are indistinguishable from their base model."""


class LipschitzEstimateWarning(UserWarning):
    """No model pair had a usable implementation distance."""
