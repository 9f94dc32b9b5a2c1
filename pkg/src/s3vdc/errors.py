"""Exception types shared across the package."""


class S3VDCError(Exception):
    """Base class for all package errors."""


class ContractError(S3VDCError, ValueError):
    """An operation was called with arguments violating its preconditions."""


class NumericsError(S3VDCError, FloatingPointError):
    """A non-finite value reached a computation that requires finite input."""


class InputValidationError(S3VDCError, ValueError):
    pass


class IngestionError(S3VDCError, ValueError):
    pass


class InitializationError(S3VDCError, RuntimeError):
    """GMM initialization could not produce a usable mixture."""


class ConfigError(S3VDCError, ValueError):
    pass


class NonFiniteLossError(S3VDCError, FloatingPointError):
    """Training produced a NaN/Inf loss.

    Carries the phase, step and loss breakdown for the diagnostic dump.
    """

    def __init__(self, message, phase=None, step=None, breakdown=None):
        super().__init__(message)
        self.phase = phase
        self.step = step
        self.breakdown = breakdown
