"""
Exception hierarchy for the qra package.

Every failure the library raises derives from QraError, so callers (and the CLI,
which maps classes to exit codes) can catch one base class.
"""


class QraError(Exception):
    """Base class for all qra errors."""


class ValidationError(QraError, ValueError):
    """Input violates a documented invariant (shape, finiteness, ordering)."""


class ConfigError(ValidationError):
    """A run configuration failed schema validation."""


class ParseError(ValidationError):
    """
    A file could not be parsed.

    Attributes:
        row (int): 1-based data row number where parsing failed, or None.
    """

    def __init__(self, message, row=None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class GapError(ValidationError):
    """
    A series has holes that DST normalization cannot explain.

    Attributes:
        missing (list): Missing timestamps.
    """

    def __init__(self, missing):
        self.missing = list(missing)
        shown = ", ".join(str(ts) for ts in self.missing[:5])
        more = "" if len(self.missing) <= 5 else f" (+{len(self.missing) - 5} more)"
        super().__init__(f"{len(self.missing)} missing timestamps: {shown}{more}")


class AlignmentError(ValidationError):
    """Two series or matrices do not share the same index."""


class DimensionMismatch(ValidationError):
    """Row or column count differs from what a fitted object expects."""


class SpanMismatch(ValidationError):
    """Reports that should cover the same prediction span do not."""


class CoverageError(ValidationError):
    """Not enough history to build the requested calibration window."""


class ScaleError(ValidationError):
    """A scaler was fitted on constant input."""


class DomainError(ValidationError):
    """A value lies outside the domain of a transformation."""


class ParamError(ValidationError):
    """Invalid hyper-parameter."""


class FitContext:
    """
    Mixin for fit failures that can name where they happened.

    Attributes:
        level (float): Quantile level being fitted, if known.
        day (date): Prediction day being fitted, if known.
    """

    def __init__(self, message, level=None, day=None):
        self.level = level
        self.day = day
        super().__init__(message)

    def annotate(self, level=None, day=None):
        """Returns a copy of this error carrying extra context."""
        level = self.level if level is None else level
        day = self.day if day is None else day
        parts = [self.args[0]]
        if level is not None and self.level is None:
            parts.append(f"quantile {level:g}")
        if day is not None and self.day is None:
            parts.append(f"day {day}")
        return type(self)("; ".join(parts), level=level, day=day)

    def __reduce__(self):
        return type(self), (self.args[0], self.level, self.day)


class RankDeficient(FitContext, ValidationError):
    """Design matrix does not have full column rank."""


class RankError(ValidationError):
    """More principal components requested than the matrix rank supports."""


class DegenerateRow(ValidationError):
    """Row standardization hit a row with zero spread."""


class MissingLevel(ValidationError):
    """A quantile level needed for an interval is not on the grid."""


class NotConverged(FitContext, QraError):
    """A solver stopped before reaching its tolerance."""


class MalformedDocument(ParseError):
    """An ENTSO-E XML document lacks the expected elements."""


class EntsoeError(QraError):
    """Base class for ENTSO-E transport failures."""


class AuthError(EntsoeError):
    """HTTP 401 or an invalid security token."""


class BadInterval(EntsoeError, ValueError):
    """HTTP 400: the provider rejected the query interval or parameters."""


class RateLimited(EntsoeError):
    """HTTP 429 persisted through every retry."""


class NetworkError(EntsoeError):
    """Connection failures and 5xx responses after retries."""
