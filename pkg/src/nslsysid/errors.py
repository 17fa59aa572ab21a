"""Exception hierarchy shared by the pipeline stages."""


class NSLError(Exception):
    """Base class for all errors raised by nslsysid."""


class InvalidArgumentError(NSLError, ValueError):
    pass


class DomainError(NSLError, ValueError):
    pass


class DivergedTrajectoryError(NSLError):
    """A simulated trajectory produced a non-finite state."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"trajectory diverged at step {step}")


class DatasetError(NSLError):
    """Dataset could not be generated or is degenerate."""


class NumericalFailureError(NSLError):
    pass


class EmptySelectionError(NSLError):
    pass


class InsufficientDataError(NSLError):
    pass


class FitFailureError(NSLError):
    def __init__(self, message, last_params=None):
        self.last_params = last_params
        super().__init__(message)
