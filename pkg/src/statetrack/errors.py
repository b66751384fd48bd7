"""Exception taxonomy.

Two broad families: ValidationError for rejected inputs (CLI exit code 1)
and NumericError for computations that fail despite valid inputs (exit
code 2). Every concrete error carries a short machine-readable name in
.violation so tests and the CLI can match on it without parsing messages.
"""

from __future__ import annotations


class StateTrackError(Exception):
    violation = "Error"


class ValidationError(StateTrackError):
    """Input rejected before any numerics ran."""

    violation = "Validation"


class NumericError(StateTrackError):
    """Numerics failed on otherwise valid input."""

    violation = "Numeric"


# ---------------------------------------------------------------------------
# validation family


class NonStochastic(ValidationError):
    violation = "NonStochastic"


class NegativeEntry(ValidationError):
    violation = "NegativeEntry"


class DimensionMismatch(ValidationError):
    violation = "DimensionMismatch"


class BudgetZero(ValidationError):
    violation = "BudgetZero"


class CostOutOfRange(ValidationError):
    violation = "CostOutOfRange"


class NotTwoState(ValidationError):
    violation = "NotTwoState"


class NotTwoStateScalar(ValidationError):
    violation = "NotTwoStateScalar"


class HypothesisViolated(ValidationError):
    violation = "HypothesisViolated"


class GridTooLarge(ValidationError):
    violation = "GridTooLarge"


class MissingAccumulator(ValidationError):
    violation = "MissingAccumulator"


class StageOutOfRange(ValidationError):
    violation = "StageOutOfRange"


class InvalidTestPoint(ValidationError):
    violation = "InvalidTestPoint"


class ParseError(ValidationError):
    violation = "ParseError"


# ---------------------------------------------------------------------------
# numeric family


class SingularCovariance(NumericError):
    violation = "SingularCovariance"


class SingularInnovation(NumericError):
    violation = "SingularInnovation"


class ZeroEvidence(NumericError):
    violation = "ZeroEvidence"


class DegenerateKernel(NumericError):
    violation = "DegenerateKernel"


class QuadratureUnstable(NumericError):
    violation = "QuadratureUnstable"


class SingularAverageCovariance(NumericError):
    violation = "SingularAverageCovariance"


class SingularMixtureCovariance(NumericError):
    violation = "SingularMixtureCovariance"


class DegenerateTestPoint(NumericError):
    violation = "DegenerateTestPoint"


class DegenerateRecursion(NumericError):
    violation = "DegenerateRecursion"


class AllTestPointsDegenerate(NumericError):
    violation = "AllTestPointsDegenerate"


class NonpositiveInformation(NumericError):
    violation = "NonpositiveInformation"
