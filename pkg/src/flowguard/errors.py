"""Exception types shared across the package."""


class FlowguardError(Exception):
    """Base class for all flowguard errors."""


class ParseError(FlowguardError):
    """Raised when an input file cannot be decoded into domain objects."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class ValidationError(FlowguardError):
    """Raised when parsed data violates a documented invariant.

    Carries every violation found, not just the first one.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(str(v) for v in self.violations))


class MalformedTraceError(FlowguardError):
    """A transaction trace failed structural validation."""


class GuardProtocolError(FlowguardError):
    """Enter/exit events arrived in an order no correct walker produces."""


class NegativeSumError(GuardProtocolError):
    """An exit would drive the open-frame sum below zero."""


class UnsupportedShapeError(FlowguardError):
    """Node trace input uses a call type or layout we cannot convert."""

    def __init__(self, message: str, frame_path: str = "root"):
        self.frame_path = frame_path
        super().__init__(f"{frame_path}: {message}")
