"""Exception and warning types raised across the package."""


class CenterlineError(ValueError):
    """Base class for every error raised by this package."""


class SchemaError(CenterlineError):
    """An interchange file does not match its schema.

    ``locus`` names the offending line or field path when known.
    """

    def __init__(self, message, locus=None):
        self.locus = locus
        if locus is not None:
            message = f"{locus}: {message}"
        super().__init__(message)


class DuplicateLaneId(SchemaError):
    pass


class EmptyTrajectory(CenterlineError):
    pass


class OutOfRange(CenterlineError):
    pass


class LengthMismatch(CenterlineError):
    pass


class EmptyCenterline(CenterlineError):
    pass


class DegeneratePolyline(CenterlineError):
    pass


class TooFewPoints(CenterlineError):
    pass


class NoForeground(CenterlineError):
    pass


class ShapeMismatch(CenterlineError):
    pass


class InvalidSpec(CenterlineError):
    pass


class DegenerateMaskWarning(UserWarning):
    """Inverse class weighting was skipped because one class is empty."""
