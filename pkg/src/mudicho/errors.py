"""Exception hierarchy.

Every error carries a short machine-readable ``code`` and the name of the
condition it violates, so the CLI can emit a structured error object.
Validation-type errors map to exit status 2, numerical ones to 3.
"""


class MudichoError(Exception):
    code = "error"
    exit_status = 3

    def __init__(self, message, *, condition=None, witness=None):
        super().__init__(message)
        self.condition = condition
        self.witness = witness

    def to_dict(self):
        out = {"error": self.code, "message": str(self)}
        if self.condition is not None:
            out["condition"] = self.condition
        if self.witness is not None:
            out["witness"] = self.witness
        return out


class ValidationFailure(MudichoError):
    """Input is malformed or violates a declared invariant."""

    code = "validation"
    exit_status = 2


class ConfigurationError(ValidationFailure):
    code = "configuration"


class InvalidGrowthRate(ValidationFailure):
    code = "invalid_growth_rate"


class DomainError(ValidationFailure):
    code = "domain"


class SchemaError(ValidationFailure):
    code = "schema"


class ParseError(ValidationFailure):
    code = "parse"

    def __init__(self, message, offset, expected=None):
        detail = f"{message} at byte {offset}"
        if expected:
            detail += f" (expected {expected})"
        super().__init__(detail, condition="expression grammar", witness={"offset": offset})
        self.offset = offset
        self.expected = expected


class NotHyperbolicError(ValidationFailure):
    code = "not_hyperbolic"


class NumericalFailure(MudichoError):
    code = "numerical"
    exit_status = 3


class IllConditionedError(NumericalFailure):
    code = "ill_conditioned"


class ContractionFailure(NumericalFailure):
    code = "contraction_failure"


class WindowError(NumericalFailure):
    code = "window"


class WindowExhausted(WindowError):
    code = "window_exhausted"

    def __init__(self, message, required):
        super().__init__(message, condition="source window", witness={"required_window": int(required)})
        self.required = int(required)


class GapNotResolved(NumericalFailure):
    code = "gap_not_resolved"


class DichotomyTooWeak(NumericalFailure):
    code = "dichotomy_too_weak"


class ConvergenceError(NumericalFailure):
    code = "no_convergence"
