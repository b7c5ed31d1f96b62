"""Exception hierarchy shared by the solver modules."""


class FidSlamError(Exception):
    """Base class for all package errors."""


class ParseError(FidSlamError):
    """A config or log document could not be parsed."""


class ValidationError(FidSlamError):
    """A document parsed but violates a structural rule.

    ``path`` locates the offending entry, e.g. ``tags[3].size``.
    """

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class NonPositiveSize(ValidationError):
    pass


class PointBehindCamera(FidSlamError):
    """A tag corner landed at or behind the camera plane during projection."""

    def __init__(self, message: str = "point behind camera", factor=None):
        self.factor = factor
        super().__init__(message)


class DegenerateConfiguration(FidSlamError):
    pass


class NoValidPose(FidSlamError):
    pass


class EvaluationFailure(FidSlamError):
    """The optimizer could not find an evaluable step."""

    def __init__(self, factor_id, message: str = ""):
        self.factor_id = factor_id
        super().__init__(message or f"factor {factor_id} could not be evaluated")


class SingularSystem(FidSlamError):
    """Normal equations are rank deficient (usually an unanchored gauge)."""


class InitializationImpossible(FidSlamError):
    def __init__(self, variable):
        self.variable = variable
        super().__init__(f"cannot initialize {variable}: no factor with a single unknown")


class OutOfOrderFrame(FidSlamError):
    pass


class UnknownBody(FidSlamError):
    pass


class NoPoses(UnknownBody):
    """The body exists but has no determined dynamic poses."""
