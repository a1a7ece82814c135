"""Exception types raised across the package.

Every error derives from :class:`ShiftDiagError`, so callers that only care
whether a run failed can catch a single type. The command-line front end maps
:class:`InputError` subclasses to exit code 2 and everything else to 3.
"""


class ShiftDiagError(Exception):
    """Base class for all package errors."""


class InputError(ShiftDiagError):
    """Problems with user-supplied files, columns or configuration."""


class SchemaError(InputError):
    """A required column is missing or a column role is ambiguous."""


class ParseError(InputError):
    """A cell could not be parsed as a number.

    Parameters
    ----------
    message : str
        Human-readable description.
    row : int, optional
        One-based data row (the header is row 0).
    column : str, optional
        Column name of the offending cell.
    """

    def __init__(self, message, row=None, column=None):
        super().__init__(message)
        self.row = row
        self.column = column


class EmptyInputError(InputError):
    """The input file holds a header but no data rows, or nothing at all."""


class ValidationError(InputError):
    """Values are present but violate a documented range."""


class ShapeError(ShiftDiagError):
    """Array dimensions do not match what a fitted object expects."""


class InsufficientDataError(ShiftDiagError):
    """Too few rows for the requested operation."""


class DegenerateLabelError(ShiftDiagError):
    """A classifier was asked to learn from labels of a single class."""


class DegenerateDetectorError(ShiftDiagError):
    """A detector flags too few rows to define a subgroup."""


class NotApplicableError(ShiftDiagError):
    """The operation does not apply to the given object."""


class SupportTooLargeError(ShiftDiagError):
    """A brute-force enumeration was requested over too many support points."""
