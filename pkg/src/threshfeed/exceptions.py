"""Exception types raised across the package."""


class ConfigurationError(ValueError):
    """Invalid model, policy or experiment parameters."""


class DomainError(ValueError):
    """Argument outside the mathematical domain of a function."""


class ShapeError(ValueError):
    """Array dimensions do not match what the operation expects."""


class PolicyKindError(TypeError):
    """A policy of the wrong family was passed (e.g. general rule to an MTFP matcher)."""


class ContractError(ValueError):
    """Inputs violate a precondition that ties several arguments together."""


class SymmetryError(ValueError):
    """A feedback rule is not beam symmetric.

    The offending :class:`~threshfeed.policy.SymmetryReport` is kept on ``report``.
    """

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
