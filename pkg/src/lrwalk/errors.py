"""Exception hierarchy shared by all modules."""


class LRWalkError(Exception):
    """Base class for package errors."""


class InvalidSiteError(LRWalkError, KeyError):
    pass


class BudgetExceededError(LRWalkError):
    """Ball enumeration would exceed the configured site budget."""


class SpaceLoadError(LRWalkError, ValueError):
    pass


class ConvergenceError(LRWalkError):
    """Fixed-point iteration failed; carries the last iterate and its residual."""

    def __init__(self, message, last_iterate=None, residual=None):
        super().__init__(message)
        self.last_iterate = last_iterate
        self.residual = residual


class ConcavityCertificationError(LRWalkError):
    pass


class KernelBuildError(LRWalkError, ValueError):
    pass


class LeakBudgetExceeded(LRWalkError):
    def __init__(self, message, n_reached):
        super().__init__(message)
        self.n_reached = n_reached


class InsufficientDepthError(LRWalkError):
    def __init__(self, message, required=None):
        super().__init__(message)
        self.required = required


class WindowTooSmallError(LRWalkError):
    pass


class CensoredPathsError(LRWalkError):
    pass


class NoFeasibleGammaError(LRWalkError):
    pass


class EmptyScanError(LRWalkError):
    pass


class ZeroMinimumError(LRWalkError):
    pass


class ConfigError(LRWalkError, ValueError):
    """Invalid experiment configuration; message names the offending field."""


class MissingDependencyError(LRWalkError):
    """A pipeline stage needs artifacts from an earlier stage that are absent."""
