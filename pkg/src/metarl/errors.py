"""Exception types shared across the package."""


class MetaRLError(Exception):
    pass


class InvalidArgument(MetaRLError, ValueError):
    pass


class ProtocolViolation(MetaRLError, RuntimeError):
    pass


class NumericalFailure(MetaRLError, ArithmeticError):
    def __init__(self, message: str, **diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics

    def __str__(self):
        base = super().__str__()
        if not self.diagnostics:
            return base
        extra = ", ".join(f"{k}={v!r}" for k, v in self.diagnostics.items())
        return f"{base} ({extra})"


class DivergenceError(NumericalFailure):
    """KL against a distribution with zero mass where the reference is positive."""
