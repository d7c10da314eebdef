"""Exception types.

Every error carries a short upper-case ``code`` so the CLI can print a
single machine-parsable line.
"""


class GluCtcError(Exception):
    code = "ERROR"


class TooLargeError(GluCtcError):
    code = "TOO_LARGE"


class InvalidStrongLabel(GluCtcError):
    code = "INVALID_STRONG"


class LabelParseError(GluCtcError):
    code = "PARSE_ERROR"

    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class EmptySignalError(GluCtcError):
    code = "EMPTY_SIGNAL"


class BadRangeError(GluCtcError):
    code = "BAD_RANGE"


class BadMagicError(GluCtcError):
    code = "BAD_MAGIC"


class TruncatedError(GluCtcError):
    code = "TRUNCATED"


class ShapeMismatch(GluCtcError):
    code = "SHAPE_MISMATCH"


class NotDivisibleError(GluCtcError):
    code = "NOT_DIVISIBLE"


class BadTemplateError(GluCtcError):
    code = "BAD_TEMPLATE"


class PlacementFailed(GluCtcError):
    code = "PLACEMENT_FAILED"


class EmptyDatasetError(GluCtcError):
    code = "EMPTY_DATASET"


class AllInfeasibleError(GluCtcError):
    code = "ALL_INFEASIBLE"


class DegenerateLabels(GluCtcError):
    code = "DEGENERATE"


class ConfigError(GluCtcError):
    code = "CONFIG"
