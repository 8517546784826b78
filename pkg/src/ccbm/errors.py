"""Exception types shared across the package."""


class CCBMError(Exception):
    """Base class for all package errors."""


class InvertedElement(CCBMError):
    pass


class SolverFailure(CCBMError):
    pass


class MeshMismatch(CCBMError):
    pass


class GeometryMismatch(CCBMError):
    pass


class EmptyInclusion(CCBMError):
    pass


class NoNegativeMinimum(CCBMError):
    """Raised when the topological gradient has no negative values (no contact detected)."""


class NoMinima(CCBMError):
    pass


class NoRejection(CCBMError):
    pass


class ZeroDirection(CCBMError):
    pass


class StepTooSmall(CCBMError):
    """Backtracking fell below the step tolerance without a decrease of the cost."""


class InterfaceNotResolved(CCBMError):
    pass


class ConfigError(CCBMError):
    def __init__(self, field: str, message: str, line: int | None = None):
        self.field = field
        self.message = message
        self.line = line
        where = f" (line {line})" if line is not None else ""
        super().__init__(f"{field}{where}: {message}")
