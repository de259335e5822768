"""Exception hierarchy.

``ValidationError`` subclasses signal bad user input (CLI exit code 2);
everything else derived from ``FrugalFlowsError`` is a runtime failure.
"""


class FrugalFlowsError(Exception):
    pass


class ValidationError(FrugalFlowsError, ValueError):
    pass


class DimensionError(ValidationError):
    pass


class InvalidParameterError(ValidationError):
    pass


class InvalidSplineError(InvalidParameterError):
    pass


class CompositionError(ValidationError):
    pass


class DomainError(ValidationError):
    pass


class DegenerateColumnError(ValidationError):
    pass


class UnknownLevelError(ValidationError):
    pass


class SchemaError(ValidationError):
    pass


class SpecError(ValidationError):
    pass


class ParseError(ValidationError):
    pass


class VersionError(ValidationError):
    pass


class InsufficientDataError(ValidationError):
    pass


class DegenerateTreatmentError(ValidationError):
    pass


class UnsupportedVariantError(ValidationError):
    pass


class NumericError(FrugalFlowsError, ArithmeticError):
    def __init__(self, message, op=None, row=None):
        super().__init__(message)
        self.op = op
        self.row = row


class TrainingFailure(NumericError):
    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class ConvergenceError(FrugalFlowsError):
    pass


class SeparationError(ConvergenceError):
    pass


class SingularDesignError(FrugalFlowsError, ValueError):
    pass
