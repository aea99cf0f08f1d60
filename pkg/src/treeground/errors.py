"""Exception hierarchy shared by the library and the command line."""


class TreeGroundError(Exception):
    """Base class for every error raised by this package."""

    exit_code = 1


class UsageError(TreeGroundError):
    exit_code = 1


class DataError(TreeGroundError):
    """Malformed, truncated or inconsistent dataset / checkpoint input."""

    exit_code = 2


class NumericError(TreeGroundError, FloatingPointError):
    """A primitive produced a non-finite value or shapes did not conform."""

    exit_code = 3


class ShapeError(NumericError, ValueError):
    pass


class EmptyCandidates(TreeGroundError):
    """No branch satisfies the leaf-count bounds."""
