"""Exception and warning types shared across the package."""


class PriorsweepError(Exception):
    """Base class for all errors raised by this package."""


class InvalidHyperparameterError(PriorsweepError, ValueError):
    """Hyperparameter outside the family's domain (e.g. w not in (0,1))."""


class UnsupportedOperationError(PriorsweepError):
    """The family does not implement an optional capability (e.g. gradients)."""


class SingularDesignError(PriorsweepError):
    """X_gamma'X_gamma is singular for a visited model."""


class ConnectivityError(PriorsweepError):
    """The pooled samples do not connect all skeleton densities."""


class SupportViolationError(PriorsweepError):
    """A pooled sample has zero density under every skeleton prior."""


class ConvergenceError(PriorsweepError):
    """An iterative solver failed to reach its tolerance."""


class ConfigError(PriorsweepError, ValueError):
    """Invalid study configuration."""


class SupportWarning(UserWarning):
    """Numerator support is disjoint from the sampled mixture at some h."""


class DegenerateDesignWarning(UserWarning):
    """Control-variate regression design is rank deficient."""
