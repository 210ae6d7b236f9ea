"""Exception hierarchy.

Every error raised on purpose by this package derives from
:class:`RobustATEError`, so callers running many replications can catch a
single class and count the failure.
"""


class RobustATEError(Exception):
    pass


# --- validation -----------------------------------------------------------


class ValidationError(RobustATEError, ValueError):
    pass


class NonBinaryTreatment(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    def __init__(self, name, row, col=None):
        self.name = name
        self.row = row
        self.col = col
        where = f"row {row}" if col is None else f"row {row}, col {col}"
        super().__init__(f"non-finite value in {name} at {where}")


class DegenerateArm(ValidationError):
    pass


class ShapeMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


# --- ingestion ------------------------------------------------------------


class IngestError(RobustATEError):
    pass


class ParseError(IngestError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class RaggedRows(IngestError):
    pass


class EmptyMatrix(IngestError):
    pass


class UnknownLabel(IngestError):
    def __init__(self, sample_id):
        self.sample_id = sample_id
        super().__init__(f"no class label for sample {sample_id!r}")


# --- estimation -----------------------------------------------------------


class EstimationError(RobustATEError):
    pass


class ConvexHullViolation(EstimationError):
    """Zero is not inside the convex hull of the estimating-function rows."""


class SingularHessian(EstimationError):
    pass


class NotConverged(EstimationError):
    pass


class AllInfeasible(EstimationError):
    pass


class SingularBread(EstimationError):
    pass


# --- intervals ------------------------------------------------------------


class IntervalError(RobustATEError):
    pass


class UndefinedAtZero(IntervalError, ZeroDivisionError):
    pass


class OverflowGuard(IntervalError, OverflowError):
    pass


class RootNotBracketed(IntervalError):
    def __init__(self, target, p_range):
        self.target = target
        self.p_range = p_range
        super().__init__(
            f"no root for P(alpha) = {target:g}; attained range "
            f"[{p_range[0]:.6g}, {p_range[1]:.6g}]"
        )


class TooManyFailedReplicates(IntervalError):
    pass
