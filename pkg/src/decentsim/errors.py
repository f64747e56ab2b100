"""Exception hierarchy shared by all modules."""


class DecentsimError(Exception):
    """Base class for every error raised by this package."""


class InvalidTopologyError(DecentsimError, ValueError):
    pass


class InvalidParameterError(DecentsimError, ValueError):
    pass


class InvariantViolation(DecentsimError, ValueError):
    pass


class NotPSDError(DecentsimError, ValueError):
    pass


class DimensionError(DecentsimError, ValueError):
    pass


class SingularityError(DecentsimError, ArithmeticError):
    pass


class ParseError(DecentsimError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class OptimumUnavailable(DecentsimError, RuntimeError):
    pass


class ConvergenceError(DecentsimError, RuntimeError):
    """Iterative solver hit its iteration cap; ``best`` holds the last iterate."""

    def __init__(self, message, best=None, grad_norm=None):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm


class StateError(DecentsimError, RuntimeError):
    pass


class ConfigurationError(DecentsimError, ValueError):
    pass


class DivergenceError(DecentsimError, RuntimeError):
    """Iterates blew up; ``trace`` carries the records collected so far."""

    def __init__(self, message, iteration=None, trace=None):
        super().__init__(message)
        self.iteration = iteration
        self.trace = trace


class VerificationFailure(DecentsimError, AssertionError):
    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
