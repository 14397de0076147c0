"""Exception types shared across the package."""


class AffuseError(Exception):
    """Base class for all package errors."""


class DimensionError(AffuseError, ValueError):
    """Operand shapes do not conform."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(s) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class ValidationError(AffuseError, ValueError):
    """Input data or configuration failed validation."""

    def __init__(self, message, *, location=None):
        self.location = location
        if location:
            message = f"{location}: {message}"
        super().__init__(message)


class ContractError(AffuseError, RuntimeError):
    """A caller violated an operation's preconditions."""


class TrainingError(AffuseError, RuntimeError):
    """Training diverged or could not proceed."""
