"""Exception types shared across the package."""


class JumpBridgeError(Exception):
    """Base class for all package errors."""


class UnsupportedModelError(JumpBridgeError):
    """Model falls outside what an operation can handle (e.g. infinite activity)."""


class DomainError(JumpBridgeError):
    """Evaluation requested outside a field's or grid's domain."""


class OutsideSupportError(JumpBridgeError):
    """Transformed quantity requested at a point where h(t, x) <= eta."""


class InfeasibleError(JumpBridgeError):
    """Target marginal charges cells the reference kernel cannot reach."""

    def __init__(self, message, cells=None):
        super().__init__(message)
        self.cells = list(cells) if cells is not None else []


class NotConvergedError(JumpBridgeError):
    """Iterative solver hit max_iter before reaching tolerance."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class ConfigError(JumpBridgeError):
    """Scenario configuration failed schema validation."""
